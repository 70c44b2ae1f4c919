//! Finite-difference audits of every hand-derived gradient: adjust pooling,
//! the full network, the margin and coupled bag losses, and both sides of
//! the adversarial objective.

use amil::kernel::{dot, finite_diff_check, l2_norm, GradCheckReport, DEFAULT_FD_STEP};
use amil::loss::{
    coupled_loss_from_scores, instance_prob, margin_loss, margin_loss_grad, LossConfig,
};
use amil::net::{mean_scores, MilNetwork, NetworkDims, PoolingMode, UpstreamGrads};
use amil::pooling::{adjust_pool, adjust_pool_backward, squash, InstanceBag};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const COMPONENTS: [&str; 5] = ["pooling", "milnet", "margin", "coupled", "adversarial"];
pub const TOLERANCE: f64 = 1e-4;

/// Outcome of one component's audit across all its seeds.
pub struct ComponentReport {
    pub name: &'static str,
    pub seeds_checked: usize,
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub worst_seed: u64,
}

impl ComponentReport {
    pub fn pass(&self) -> bool {
        self.max_relative_error < TOLERANCE
    }
}

struct Tracker {
    report: ComponentReport,
}

impl Tracker {
    fn new(name: &'static str) -> Self {
        Tracker {
            report: ComponentReport {
                name,
                seeds_checked: 0,
                max_relative_error: 0.0,
                worst_index: 0,
                worst_seed: 0,
            },
        }
    }

    fn record(&mut self, seed: u64, r: &GradCheckReport) {
        self.report.seeds_checked += 1;
        if r.max_relative_error > self.report.max_relative_error {
            self.report.max_relative_error = r.max_relative_error;
            self.report.worst_index = r.worst_index;
            self.report.worst_seed = seed;
        }
    }
}

fn random_instances(rng: &mut ChaCha8Rng, k: usize, d: usize) -> Vec<Vec<f64>> {
    (0..k)
        .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect()
}

fn flatten(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

fn unflatten(flat: &[f64], d: usize) -> Vec<Vec<f64>> {
    flat.chunks(d).map(|c| c.to_vec()).collect()
}

fn audit_pooling(base_seed: u64, seeds: usize, corrupt: bool) -> anyhow::Result<ComponentReport> {
    let mut t = Tracker::new("pooling");
    for s in 0..seeds as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(base_seed ^ (0x100 + s));
        let k = rng.gen_range(2..=8);
        let d = rng.gen_range(2..=16);
        let bag = random_instances(&mut rng, k, d);
        let probe: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (_, state) = adjust_pool(&bag, 3)?;
        let mut analytic = flatten(&adjust_pool_backward(&bag, &state, &probe)?);
        if corrupt {
            analytic[0] += 0.01;
        }
        let f = |p: &[f64]| {
            let inst = unflatten(p, d);
            let (out, _) = adjust_pool(&inst, 3).unwrap();
            dot(&out, &probe)
        };
        let report = finite_diff_check(f, &flatten(&bag), &analytic, DEFAULT_FD_STEP)?;
        t.record(s, &report);
    }
    Ok(t.report)
}

/// Smallest |pre-activation| across levels; draws where a ReLU input sits
/// within the probe step of zero are skipped because central differences
/// straddle the kink there.
fn min_abs_preactivation(net: &MilNetwork, instances: &[Vec<f64>]) -> f64 {
    let mut current = instances.to_vec();
    let mut min_abs = f64::INFINITY;
    for level in &net.levels {
        let mut next = Vec::with_capacity(current.len());
        for x in &current {
            let mut z = level.transform.w.matvec(x);
            for (zv, bv) in z.iter_mut().zip(level.transform.b.iter()) {
                *zv += bv;
            }
            for v in &z {
                min_abs = min_abs.min(v.abs());
            }
            next.push(z.iter().map(|v| v.max(0.0)).collect());
        }
        current = next;
    }
    min_abs
}

const KINK_MARGIN: f64 = 1e-3;

fn audit_milnet(base_seed: u64, seeds: usize) -> anyhow::Result<ComponentReport> {
    let dims = NetworkDims {
        input_dim: 6,
        hidden_dim: 10,
        output_dim: 4,
        level_count: 3,
    };
    let mut t = Tracker::new("milnet");
    let mut candidate = 0u64;
    while t.report.seeds_checked < seeds && candidate < 8 * seeds as u64 {
        let s = candidate;
        candidate += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(base_seed ^ (0x200 + s));
        let net = MilNetwork::init(dims, PoolingMode::Adjust { iterations: 3 }, base_seed ^ s)?;
        let instances = random_instances(&mut rng, 5, dims.input_dim);
        if min_abs_preactivation(&net, &instances) < KINK_MARGIN {
            continue;
        }
        let bag = InstanceBag::new(instances, 1, 0)?;
        let probes: Vec<Vec<f64>> = (0..dims.level_count)
            .map(|_| (0..dims.output_dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let pass = net.forward(&bag)?;
        let upstream = UpstreamGrads {
            score_grads: probes.clone(),
            accum_grad: None,
        };
        let (grads, _) = net.backward(&bag, &pass, &upstream)?;
        let template = net.clone();
        let f = |p: &[f64]| {
            let mut probe_net = template.clone();
            probe_net.set_params_flat(p);
            let out = probe_net.forward(&bag).unwrap();
            out.outputs
                .per_level_scores
                .iter()
                .zip(probes.iter())
                .map(|(sc, g)| dot(sc, g))
                .sum()
        };
        let report = finite_diff_check(f, &net.params_flat(), &grads.flat(), DEFAULT_FD_STEP)?;
        t.record(s, &report);
    }
    if t.report.seeds_checked < seeds {
        anyhow::bail!("milnet audit: only {} clean draws found", t.report.seeds_checked);
    }
    Ok(t.report)
}

fn audit_margin(base_seed: u64, seeds: usize) -> anyhow::Result<ComponentReport> {
    let cfg = LossConfig::default();
    let mut t = Tracker::new("margin");
    let mut candidate = 0u64;
    while t.report.seeds_checked < seeds && candidate < 8 * seeds as u64 {
        let s = candidate;
        candidate += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(base_seed ^ (0x300 + s));
        let d = rng.gen_range(2..=8);
        let sigma: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let v = squash(&sigma); // guarantees norm in [0, 1)
        let n = l2_norm(&v);
        // the hinge is non-differentiable exactly at the margins
        if n < KINK_MARGIN
            || (n - cfg.m_plus).abs() < KINK_MARGIN
            || (n - cfg.m_minus).abs() < KINK_MARGIN
        {
            continue;
        }
        let label = (s % 2) as u8;
        let g_norm = margin_loss_grad(n, label, &cfg);
        let analytic: Vec<f64> = v.iter().map(|x| g_norm * x / n).collect();
        let f = |p: &[f64]| margin_loss(l2_norm(p), label, &cfg).unwrap();
        let report = finite_diff_check(f, &v, &analytic, DEFAULT_FD_STEP)?;
        t.record(s, &report);
    }
    if t.report.seeds_checked < seeds {
        anyhow::bail!("margin audit: only {} clean draws found", t.report.seeds_checked);
    }
    Ok(t.report)
}

fn audit_coupled(base_seed: u64, seeds: usize) -> anyhow::Result<ComponentReport> {
    let cfg = LossConfig::default();
    let mut t = Tracker::new("coupled");
    let mut candidate = 0u64;
    while t.report.seeds_checked < seeds && candidate < 8 * seeds as u64 {
        let s = candidate;
        candidate += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(base_seed ^ (0x400 + s));
        let k = rng.gen_range(1..=6);
        let scores: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..2.0)).collect();
        // pseudo-labels flip discontinuously where q crosses 0.5
        let near_flip = scores.iter().any(|&h| {
            let q = instance_prob(h, cfg.lambda_prob).unwrap();
            (q - 0.5).abs() < KINK_MARGIN
        });
        if near_flip {
            continue;
        }
        let label = (s % 2) as u8;
        let (_, analytic) = coupled_loss_from_scores(&scores, label, &cfg)?;
        let f = |p: &[f64]| coupled_loss_from_scores(p, label, &cfg).unwrap().0;
        let report = finite_diff_check(f, &scores, &analytic, DEFAULT_FD_STEP)?;
        t.record(s, &report);
    }
    if t.report.seeds_checked < seeds {
        anyhow::bail!("coupled audit: only {} clean draws found", t.report.seeds_checked);
    }
    Ok(t.report)
}

/// Audit both adversarial gradients through a small discriminator:
/// the generator's gap term with respect to the fake heatmap (including the
/// path through the discriminator's input), and `l_real - k l_fake` with
/// respect to the discriminator's parameters.
fn audit_adversarial(base_seed: u64, seeds: usize) -> anyhow::Result<ComponentReport> {
    let heatmap_dim = 6;
    let base_dim = 4;
    let dims = NetworkDims {
        input_dim: base_dim + heatmap_dim,
        hidden_dim: 8,
        output_dim: heatmap_dim,
        level_count: 2,
    };
    let level_scale = 1.0 / dims.level_count as f64;
    let k_balance = 0.7;
    let mut t = Tracker::new("adversarial");
    let mut candidate = 0u64;
    // each clean draw contributes two checks: generator-side and
    // discriminator-side
    while t.report.seeds_checked < 2 * seeds && candidate < 8 * seeds as u64 {
        let s = candidate;
        candidate += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(base_seed ^ (0x500 + s));
        let disc = MilNetwork::init(dims, PoolingMode::Adjust { iterations: 3 }, base_seed ^ (0x600 + s))?;
        let bases = random_instances(&mut rng, 3, base_dim);
        let real_hm: Vec<f64> = (0..heatmap_dim).map(|_| rng.gen_range(0.0..1.0)).collect();
        let fake_hm: Vec<f64> = (0..heatmap_dim).map(|_| rng.gen_range(0.0..1.0)).collect();
        let make_bag = |hm: &[f64]| {
            let instances: Vec<Vec<f64>> = bases
                .iter()
                .map(|b| b.iter().chain(hm.iter()).copied().collect())
                .collect();
            InstanceBag::new(instances, 1, 0).unwrap()
        };
        let real_bag = make_bag(&real_hm);
        let fake_bag = make_bag(&fake_hm);
        if min_abs_preactivation(&disc, &real_bag.instances) < KINK_MARGIN
            || min_abs_preactivation(&disc, &fake_bag.instances) < KINK_MARGIN
        {
            continue;
        }

        let recon = |net: &MilNetwork, bag: &InstanceBag| {
            let pass = net.forward(bag).unwrap();
            mean_scores(&pass.outputs.per_level_scores)
        };

        // Generator side: gap(S~) = sum (S~ - D(S~))^2, gradient on S~.
        let fake_pass = disc.forward(&fake_bag)?;
        let fake_recon = mean_scores(&fake_pass.outputs.per_level_scores);
        let err: Vec<f64> = fake_hm.iter().zip(fake_recon.iter()).map(|(a, b)| a - b).collect();
        let g_level: Vec<f64> = err.iter().map(|e| -2.0 * e * level_scale).collect();
        let upstream = UpstreamGrads {
            score_grads: vec![g_level; dims.level_count],
            accum_grad: None,
        };
        let (_, input_grads) = disc.backward(&fake_bag, &fake_pass, &upstream)?;
        let mut analytic_gen: Vec<f64> = err.iter().map(|e| 2.0 * e).collect();
        for g_inst in &input_grads {
            for (j, gv) in g_inst[base_dim..].iter().enumerate() {
                analytic_gen[j] += gv;
            }
        }
        let f_gen = |hm: &[f64]| {
            let bag = make_bag(hm);
            let r = recon(&disc, &bag);
            hm.iter().zip(r.iter()).map(|(a, b)| (a - b) * (a - b)).sum()
        };
        let report = finite_diff_check(f_gen, &fake_hm, &analytic_gen, DEFAULT_FD_STEP)?;
        t.record(s, &report);

        // Discriminator side: l_real - k l_fake, gradient on parameters.
        let real_pass = disc.forward(&real_bag)?;
        let real_recon = mean_scores(&real_pass.outputs.per_level_scores);
        let g_real: Vec<f64> = real_hm
            .iter()
            .zip(real_recon.iter())
            .map(|(a, b)| -2.0 * (a - b) * level_scale)
            .collect();
        let (mut disc_grads, _) = disc.backward(
            &real_bag,
            &real_pass,
            &UpstreamGrads {
                score_grads: vec![g_real; dims.level_count],
                accum_grad: None,
            },
        )?;
        let g_fake: Vec<f64> = err.iter().map(|e| 2.0 * k_balance * e * level_scale).collect();
        let (fake_grads, _) = disc.backward(
            &fake_bag,
            &fake_pass,
            &UpstreamGrads {
                score_grads: vec![g_fake; dims.level_count],
                accum_grad: None,
            },
        )?;
        disc_grads.add(&fake_grads);
        let template = disc.clone();
        let f_disc = |p: &[f64]| {
            let mut probe = template.clone();
            probe.set_params_flat(p);
            let rr = recon(&probe, &real_bag);
            let fr = recon(&probe, &fake_bag);
            let l_real: f64 = real_hm
                .iter()
                .zip(rr.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let l_fake: f64 = fake_hm
                .iter()
                .zip(fr.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            l_real - k_balance * l_fake
        };
        let report = finite_diff_check(f_disc, &disc.params_flat(), &disc_grads.flat(), DEFAULT_FD_STEP)?;
        t.record(s, &report);
    }
    if t.report.seeds_checked < 2 * seeds {
        anyhow::bail!(
            "adversarial audit: only {} clean draws found",
            t.report.seeds_checked
        );
    }
    Ok(t.report)
}

/// Run the selected audits. `corrupt` perturbs one analytic gradient to
/// exercise the failure path.
pub fn run_audit(
    seed: u64,
    seeds: usize,
    component: &str,
    corrupt: bool,
) -> anyhow::Result<Vec<ComponentReport>> {
    let mut reports = Vec::new();
    let want = |name: &str| component == "all" || component == name;
    if want("pooling") {
        reports.push(audit_pooling(seed, seeds, corrupt)?);
    }
    if want("milnet") {
        reports.push(audit_milnet(seed, seeds)?);
    }
    if want("margin") {
        reports.push(audit_margin(seed, seeds)?);
    }
    if want("coupled") {
        reports.push(audit_coupled(seed, seeds)?);
    }
    if want("adversarial") {
        reports.push(audit_adversarial(seed, seeds)?);
    }
    if reports.is_empty() {
        anyhow::bail!(
            "unknown component `{component}`; expected all or one of {}",
            COMPONENTS.join(", ")
        );
    }
    Ok(reports)
}
