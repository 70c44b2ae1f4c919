//! Command-line surface for the pose-from-bags experiments: dataset
//! generation, training, evaluation, gradient auditing, and a pooling demo.

mod config;
mod gradcheck;

use amil::kernel::l2_norm;
use amil::metrics::{confusion, pck, pck_curve, pck_to_csv, pck_to_json, Normalizer};
use amil::net::PoolingMode;
use amil::pooling::adjust_pool;
use amil::pose::{
    decode_pose, flip_averaged_heatmaps, generate_sample, predict_heatmap, read_dataset_file,
    torso_segment, write_dataset_file, KeypointSet, PoseConfig, PoseSample, JOINTS_7,
};
use amil::train::{
    load_checkpoint, save_checkpoint, TrainConfig, Trainer, METRICS_CSV_HEADER,
};
use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use config::{resolve, usage, write_resolved, CliError, FileConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "amil", version, about = "MIL pose experiments", disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic train/val/test splits in the AMIL-DATA v1 format
    GenData(GenDataArgs),
    /// Train a heatmap generator (optionally adversarially)
    Train(TrainArgs),
    /// Evaluate a checkpoint with PCK/PCKh, curves, and a confusion matrix
    Eval(EvalArgs),
    /// Audit all hand-derived gradients against finite differences
    Gradcheck(GradcheckArgs),
    /// Print per-iteration pooling internals for a toy bag
    PoolDemo(PoolDemoArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum PoolingFlag {
    Adjust,
    Mean,
    Max,
}

#[derive(Clone, Copy, ValueEnum)]
enum FlipFlag {
    On,
    Off,
}

#[derive(Args)]
struct GenDataArgs {
    /// Training sample count
    #[arg(long)]
    count: Option<usize>,
    /// Validation sample count (default: count / 5)
    #[arg(long)]
    val_count: Option<usize>,
    /// Test sample count (default: count / 5)
    #[arg(long)]
    test_count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    joints: Option<usize>,
    #[arg(long)]
    patch_size: Option<usize>,
    /// Heatmap Gaussian width in cells
    #[arg(long)]
    sigma: Option<f64>,
    /// Occlude a random rectangle in each image
    #[arg(long)]
    occlusion: bool,
    /// Output directory (default: $AMIL_OUT or ./amil-out)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Flat key = value config file; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training split in AMIL-DATA v1 format
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Total iterations (absolute, including any resumed prefix)
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    decay_every: Option<u64>,
    #[arg(long)]
    decay_base: Option<f64>,
    #[arg(long)]
    hidden_size: Option<usize>,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long, value_enum)]
    pooling: Option<PoolingFlag>,
    #[arg(long)]
    pool_iterations: Option<usize>,
    /// Train the generator alone; k stays 0
    #[arg(long)]
    no_adversarial: bool,
    /// Equilibrium factor gamma in the k update
    #[arg(long)]
    gamma: Option<f64>,
    /// Proportional gain omega_k in the k update
    #[arg(long)]
    omega_k: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    /// Checkpoint interval in iterations
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Resume from a checkpoint file
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// PCK tolerance
    #[arg(long)]
    r: Option<f64>,
    /// Flip averaging at inference
    #[arg(long, value_enum)]
    flip: Option<FlipFlag>,
    #[arg(long)]
    sigma: Option<f64>,
    /// Worker threads for prediction (aggregation is order-deterministic)
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random draws per component
    #[arg(long, default_value_t = 20)]
    seeds: usize,
    /// all, pooling, milnet, margin, coupled, or adversarial
    #[arg(long, default_value = "all")]
    component: String,
    /// Corrupt one analytic gradient (negative-control test hook)
    #[arg(long, hide = true)]
    corrupt: bool,
}

#[derive(Args)]
struct PoolDemoArgs {
    /// Bag literal: instances split by ';', coordinates by ','
    #[arg(long)]
    bag: Option<String>,
    #[arg(long, default_value_t = 3)]
    iterations: usize,
    /// Random-bag fallback when --bag is absent
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    instances: usize,
    #[arg(long, default_value_t = 3)]
    dim: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(), // exits 2 on usage errors, 0 on --help/--version
    };
    let result = match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::PoolDemo(a) => cmd_pool_demo(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn default_out() -> PathBuf {
    std::env::var_os("AMIL_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("amil-out"))
}

fn ensure_out_dir(out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::Runtime(anyhow!("cannot create {}: {e}", out.display())))
}

fn load_file_config(path: &Option<PathBuf>, allowed: &[&str]) -> Result<FileConfig, CliError> {
    match path {
        Some(p) => FileConfig::load(p, allowed),
        None => Ok(FileConfig::empty()),
    }
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

const GEN_DATA_KEYS: [&str; 9] = [
    "count",
    "val-count",
    "test-count",
    "seed",
    "image-size",
    "joints",
    "patch-size",
    "sigma",
    "occlusion",
];

fn cmd_gen_data(a: GenDataArgs) -> Result<(), CliError> {
    let file = load_file_config(&a.config, &GEN_DATA_KEYS)?;
    let count = resolve(a.count, &file, "count", 100)?;
    let val_count = resolve(a.val_count, &file, "val-count", count / 5)?;
    let test_count = resolve(a.test_count, &file, "test-count", count / 5)?;
    let seed = resolve(a.seed, &file, "seed", 0u64)?;
    let occlusion = a.occlusion || file.get::<bool>("occlusion")?.unwrap_or(false);
    let pose_cfg = PoseConfig {
        image_size: resolve(a.image_size, &file, "image-size", 64)?,
        joint_count: resolve(a.joints, &file, "joints", 7)?,
        patch_size: resolve(a.patch_size, &file, "patch-size", 8)?,
        sigma_h: resolve(a.sigma, &file, "sigma", 1.0)?,
        occlusion,
        ..PoseConfig::default()
    };
    pose_cfg.validate().map_err(|e| usage(e.to_string()))?;
    let out = a.out.unwrap_or_else(default_out);
    ensure_out_dir(&out)?;

    let splits = [("train", count, 0u64), ("val", val_count, 1), ("test", test_count, 2)];
    for (name, n, split_id) in splits {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (split_id.wrapping_mul(0x9E3779B97F4A7C15)));
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            samples.push(generate_sample(rng.gen::<u64>(), &pose_cfg)?);
        }
        let path = out.join(format!("{name}.txt"));
        write_dataset_file(&path, &samples, &pose_cfg)?;
        println!("wrote {} ({n} samples)", path.display());
    }
    write_resolved(
        &out.join("config.resolved.txt"),
        &[
            ("count", count.to_string()),
            ("val-count", val_count.to_string()),
            ("test-count", test_count.to_string()),
            ("seed", seed.to_string()),
            ("image-size", pose_cfg.image_size.to_string()),
            ("joints", pose_cfg.joint_count.to_string()),
            ("patch-size", pose_cfg.patch_size.to_string()),
            ("sigma", pose_cfg.sigma_h.to_string()),
            ("occlusion", occlusion.to_string()),
        ],
    )?;
    println!("seed {seed}, image {0}x{0}, {1} joints", pose_cfg.image_size, pose_cfg.joint_count);
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

const TRAIN_KEYS: [&str; 15] = [
    "iterations",
    "seed",
    "batch-size",
    "learning-rate",
    "weight-decay",
    "decay-every",
    "decay-base",
    "hidden-size",
    "levels",
    "pooling",
    "pool-iterations",
    "adversarial",
    "gamma",
    "omega-k",
    "checkpoint-every",
];

fn pooling_mode(flag: Option<PoolingFlag>, file: &FileConfig, iterations: usize) -> Result<PoolingMode, CliError> {
    let name = match flag {
        Some(PoolingFlag::Adjust) => "adjust".to_string(),
        Some(PoolingFlag::Mean) => "mean".to_string(),
        Some(PoolingFlag::Max) => "max".to_string(),
        None => file.get::<String>("pooling")?.unwrap_or_else(|| "adjust".into()),
    };
    match name.as_str() {
        "adjust" => Ok(PoolingMode::Adjust { iterations }),
        "mean" => Ok(PoolingMode::Mean),
        "max" => Ok(PoolingMode::Max),
        other => Err(usage(format!("unknown pooling mode `{other}`"))),
    }
}

fn pooling_name(mode: PoolingMode) -> &'static str {
    match mode {
        PoolingMode::Adjust { .. } => "adjust",
        PoolingMode::Mean => "mean",
        PoolingMode::Max => "max",
    }
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let file = load_file_config(&a.config, &TRAIN_KEYS)?;
    let defaults = TrainConfig::default();
    let pool_iterations = resolve(a.pool_iterations, &file, "pool-iterations", 3)?;
    let adversarial = if a.no_adversarial {
        false
    } else {
        file.get::<bool>("adversarial")?.unwrap_or(true)
    };
    let mut loss = defaults.loss;
    loss.gamma = resolve(a.gamma, &file, "gamma", loss.gamma)?;
    loss.omega_k = resolve(a.omega_k, &file, "omega-k", loss.omega_k)?;
    let cfg = TrainConfig {
        learning_rate: resolve(a.learning_rate, &file, "learning-rate", defaults.learning_rate)?,
        weight_decay: resolve(a.weight_decay, &file, "weight-decay", defaults.weight_decay)?,
        total_iterations: resolve(a.iterations, &file, "iterations", defaults.total_iterations)?,
        decay_every: resolve(a.decay_every, &file, "decay-every", defaults.decay_every)?,
        decay_base: resolve(a.decay_base, &file, "decay-base", defaults.decay_base)?,
        batch_size: resolve(a.batch_size, &file, "batch-size", defaults.batch_size)?,
        seed: resolve(a.seed, &file, "seed", defaults.seed)?,
        hidden_size: resolve(a.hidden_size, &file, "hidden-size", defaults.hidden_size)?,
        level_count: resolve(a.levels, &file, "levels", defaults.level_count)?,
        pooling: pooling_mode(a.pooling, &file, pool_iterations)?,
        adversarial,
        loss,
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let checkpoint_every = resolve(a.checkpoint_every, &file, "checkpoint-every", 100u64)?;
    let sigma = a.sigma.unwrap_or(1.0);
    let out = a.out.unwrap_or_else(default_out);
    ensure_out_dir(&out)?;

    let (samples, pose_cfg) = read_dataset_file(&a.data, sigma)?;
    if samples.is_empty() {
        return Err(CliError::Runtime(anyhow!(
            "dataset {} contains no samples",
            a.data.display()
        )));
    }

    let mut trainer = match &a.resume {
        Some(ckpt_path) => {
            let ckpt = load_checkpoint(ckpt_path)?;
            Trainer::resume(ckpt, cfg.clone(), pose_cfg)?
        }
        None => Trainer::new(cfg.clone(), pose_cfg)?,
    };

    write_resolved(
        &out.join("config.resolved.txt"),
        &[
            ("iterations", cfg.total_iterations.to_string()),
            ("seed", cfg.seed.to_string()),
            ("batch-size", cfg.batch_size.to_string()),
            ("learning-rate", cfg.learning_rate.to_string()),
            ("weight-decay", cfg.weight_decay.to_string()),
            ("decay-every", cfg.decay_every.to_string()),
            ("decay-base", cfg.decay_base.to_string()),
            ("hidden-size", cfg.hidden_size.to_string()),
            ("levels", cfg.level_count.to_string()),
            ("pooling", pooling_name(cfg.pooling).to_string()),
            ("pool-iterations", pool_iterations.to_string()),
            ("adversarial", cfg.adversarial.to_string()),
            ("gamma", cfg.loss.gamma.to_string()),
            ("omega-k", cfg.loss.omega_k.to_string()),
            ("checkpoint-every", checkpoint_every.to_string()),
        ],
    )?;

    let csv_path = out.join("metrics.csv");
    let mut csv = std::fs::File::create(&csv_path)
        .with_context(|| format!("cannot create {}", csv_path.display()))?;
    writeln!(csv, "{METRICS_CSV_HEADER}").context("metrics csv")?;
    while trainer.iteration < cfg.total_iterations {
        let m = trainer.step(&samples)?;
        writeln!(csv, "{}", m.csv_row()).context("metrics csv")?;
        if checkpoint_every > 0 && (m.iteration + 1) % checkpoint_every == 0 {
            let path = out.join(format!("checkpoint_{:06}.bin", m.iteration + 1));
            save_checkpoint(&path, &trainer.checkpoint())?;
        }
    }
    let final_path = out.join("checkpoint_final.bin");
    save_checkpoint(&final_path, &trainer.checkpoint())?;
    println!(
        "trained to iteration {} ({} pooling, adversarial={}); wrote {} and {}",
        trainer.iteration,
        pooling_name(cfg.pooling),
        cfg.adversarial,
        csv_path.display(),
        final_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

const EVAL_KEYS: [&str; 4] = ["r", "flip", "sigma", "workers"];

/// Predict keypoints for every sample, in chunks across `workers` threads;
/// chunk results are concatenated in order, so the output is independent of
/// the worker count.
fn predict_all(
    trainer_net: &amil::net::MilNetwork,
    samples: &[PoseSample],
    pose_cfg: &PoseConfig,
    flip: bool,
    workers: usize,
) -> anyhow::Result<Vec<KeypointSet>> {
    let predict_one = |s: &PoseSample| -> anyhow::Result<KeypointSet> {
        let hm = if flip {
            flip_averaged_heatmaps(trainer_net, &s.image, pose_cfg)?
        } else {
            predict_heatmap(trainer_net, &s.image, pose_cfg)?
        };
        Ok(decode_pose(&hm, pose_cfg.image_size))
    };
    if workers <= 1 {
        return samples.iter().map(predict_one).collect();
    }
    let chunk = samples.len().div_ceil(workers);
    let results: Vec<anyhow::Result<Vec<KeypointSet>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = samples
            .chunks(chunk.max(1))
            .map(|part| scope.spawn(move || part.iter().map(predict_one).collect()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut all = Vec::with_capacity(samples.len());
    for r in results {
        all.extend(r?);
    }
    Ok(all)
}

fn joint_names(j: usize) -> Vec<String> {
    if j == JOINTS_7.len() {
        JOINTS_7.iter().map(|s| s.to_string()).collect()
    } else {
        (0..j).map(|i| format!("j{i}")).collect()
    }
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    let file = load_file_config(&a.config, &EVAL_KEYS)?;
    let r = resolve(a.r, &file, "r", 0.2)?;
    let flip = match a.flip {
        Some(FlipFlag::On) => true,
        Some(FlipFlag::Off) => false,
        None => file.get::<String>("flip")?.map_or(true, |v| v != "off"),
    };
    let sigma = resolve(a.sigma, &file, "sigma", 1.0)?;
    let workers = resolve(a.workers, &file, "workers", 1usize)?;
    if workers == 0 {
        return Err(usage("workers must be >= 1"));
    }
    let out = a.out.unwrap_or_else(default_out);
    ensure_out_dir(&out)?;

    let ckpt = load_checkpoint(&a.checkpoint)?;
    let (samples, pose_cfg) = read_dataset_file(&a.data, sigma)?;
    if samples.is_empty() {
        return Err(CliError::Runtime(anyhow!(
            "dataset {} contains no samples",
            a.data.display()
        )));
    }
    let preds = predict_all(&ckpt.generator, &samples, &pose_cfg, flip, workers)?;
    let gts: Vec<KeypointSet> = samples.iter().map(|s| s.keypoints.clone()).collect();

    let names = joint_names(pose_cfg.joint_count);
    let name_refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    let pck_res = pck(&preds, &gts, r, Normalizer::Torso)?;
    let pckh_res = pck(&preds, &gts, r, Normalizer::HeadSegment)?;
    std::fs::write(out.join("pck.csv"), pck_to_csv(&pck_res, &name_refs)).context("pck.csv")?;
    std::fs::write(out.join("pckh.csv"), pck_to_csv(&pckh_res, &name_refs)).context("pckh.csv")?;

    let r_values: Vec<f64> = (1..=20).map(|i| i as f64 * 0.05).collect();
    for (fname, norm) in [("pck_curve.csv", Normalizer::Torso), ("pckh_curve.csv", Normalizer::HeadSegment)] {
        let curve = pck_curve(&preds, &gts, &r_values, norm)?;
        let mut text = String::from("r,mean_rate\n");
        for res in &curve {
            text.push_str(&format!("{},{}\n", res.r, res.mean_rate));
        }
        std::fs::write(out.join(fname), text).context("curve csv")?;
    }

    // Confusion assignment radius: tolerance r scaled by the dataset's mean
    // torso length, in pixels.
    let (ta, tb) = torso_segment(pose_cfg.joint_count)?;
    let mut torso_sum = 0.0;
    for g in &gts {
        let d = (
            g.joints[ta].0 - g.joints[tb].0,
            g.joints[ta].1 - g.joints[tb].1,
        );
        torso_sum += l2_norm(&[d.0, d.1]);
    }
    let radius = r * torso_sum / gts.len() as f64;
    let conf = confusion(&preds, &gts, radius)?;
    let mut text = String::from("pred\\gt,");
    text.push_str(&names.join(","));
    text.push_str(",miss\n");
    for i in 0..conf.joint_count {
        text.push_str(&names[i]);
        for j in 0..=conf.joint_count {
            text.push_str(&format!(",{}", conf.get(i, j)));
        }
        text.push('\n');
    }
    std::fs::write(out.join("confusion.csv"), text).context("confusion.csv")?;

    let report = format!(
        "{{\"r\":{},\"flip\":{},\"samples\":{},\"pck\":{},\"pckh\":{}}}",
        r,
        flip,
        samples.len(),
        pck_to_json(&pck_res),
        pck_to_json(&pckh_res)
    );
    std::fs::write(out.join("report.json"), report).context("report.json")?;

    println!("samples: {}", samples.len());
    println!("PCK@{r} (torso): {:.4}", pck_res.mean_rate);
    println!("PCKh@{r} (head segment): {:.4}", pckh_res.mean_rate);
    println!("reports written to {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

fn cmd_gradcheck(a: GradcheckArgs) -> Result<(), CliError> {
    let reports = gradcheck::run_audit(a.seed, a.seeds, &a.component, a.corrupt)?;
    println!(
        "{:<12} {:>6} {:>14} {:>8} {:>8}  status",
        "component", "checks", "max_rel_err", "worst", "seed"
    );
    let mut failed = Vec::new();
    for rep in &reports {
        println!(
            "{:<12} {:>6} {:>14.3e} {:>8} {:>8}  {}",
            rep.name,
            rep.seeds_checked,
            rep.max_relative_error,
            rep.worst_index,
            rep.worst_seed,
            if rep.pass() { "pass" } else { "FAIL" }
        );
        if !rep.pass() {
            failed.push(rep);
        }
    }
    if let Some(worst) = failed.first() {
        return Err(CliError::Runtime(anyhow!(
            "gradient audit failed: component {} exceeded {} at parameter index {} (seed {})",
            worst.name,
            gradcheck::TOLERANCE,
            worst.worst_index,
            worst.worst_seed
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// pool-demo
// ---------------------------------------------------------------------------

fn parse_bag_literal(text: &str) -> Result<Vec<Vec<f64>>, CliError> {
    let mut instances = Vec::new();
    for (i, part) in text.split(';').enumerate() {
        let mut row = Vec::new();
        for v in part.split(',') {
            let v = v.trim();
            row.push(
                v.parse::<f64>()
                    .map_err(|e| usage(format!("bag instance {i}: `{v}`: {e}")))?,
            );
        }
        instances.push(row);
    }
    Ok(instances)
}

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:+.4}")).collect();
    format!("[{}]", parts.join(", "))
}

fn cmd_pool_demo(a: PoolDemoArgs) -> Result<(), CliError> {
    let instances = match &a.bag {
        Some(text) => parse_bag_literal(text)?,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            (0..a.instances)
                .map(|_| (0..a.dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect()
        }
    };
    println!("bag of {} instances:", instances.len());
    for (i, inst) in instances.iter().enumerate() {
        println!("  f[{i}] = {}", fmt_vec(inst));
    }
    let (_, state) = adjust_pool(&instances, a.iterations)?;
    for (t, it) in state.iterations.iter().enumerate() {
        println!("iteration {}:", t + 1);
        println!("  b = {}", fmt_vec(&it.b));
        println!("  w = {}", fmt_vec(&it.w));
        println!("  ||s|| = {:.6}", l2_norm(&it.s));
    }
    println!("embedding s = {}", fmt_vec(state.embedding()));
    Ok(())
}
