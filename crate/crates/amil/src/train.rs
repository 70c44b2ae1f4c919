//! Adversarial training loop: alternating generator/discriminator updates,
//! k-balance maintenance, Adam with decoupled weight decay, the step
//! learning-rate schedule, and bit-exact checkpointing.

use crate::error::{AmilError, Result};
use crate::loss::{update_k, AdversarialState, LossConfig};
use crate::net::{mean_scores, MilNetwork, NetworkDims, PoolingMode, UpstreamGrads};
use crate::pooling::InstanceBag;
use crate::pose::{image_to_bag, PoseConfig, PoseSample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;

/// Loss magnitude beyond which training aborts.
const DIVERGENCE_LIMIT: f64 = 1e6;

/// Training hyperparameters.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub total_iterations: u64,
    pub decay_every: u64,
    pub decay_base: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub hidden_size: usize,
    pub level_count: usize,
    pub pooling: PoolingMode,
    /// When false, the discriminator is never built and k stays 0.
    pub adversarial: bool,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            weight_decay: 0.01,
            total_iterations: 350,
            decay_every: 20,
            decay_base: 0.5,
            batch_size: 8,
            seed: 0,
            hidden_size: 128,
            level_count: 3,
            pooling: PoolingMode::Adjust { iterations: 3 },
            adversarial: true,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(AmilError::Config("learning rate must be > 0".into()));
        }
        if self.decay_every == 0 {
            return Err(AmilError::Config("decay_every must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(AmilError::Config("batch size must be >= 1".into()));
        }
        self.loss.validate()
    }
}

/// Step-decay learning rate: `base * decay_base^(iteration / decay_every)`.
pub fn lr_schedule(base_lr: f64, iteration: u64, decay_every: u64, decay_base: f64) -> f64 {
    base_lr * decay_base.powi((iteration / decay_every) as i32)
}

/// Adam moments with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(param_count: usize) -> Self {
        AdamState {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
        }
    }

    /// One update with decoupled weight decay.
    pub fn update(
        &mut self,
        params: &mut [f64],
        grads: &[f64],
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(AmilError::Shape {
                context: "adam parameter/gradient/moment lengths",
                left_rows: params.len(),
                left_cols: grads.len(),
                right_rows: self.m.len(),
                right_cols: self.v.len(),
            });
        }
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * weight_decay * params[i];
            params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        Ok(())
    }
}

/// Per-iteration metrics, one CSV row each.
#[derive(Debug, Clone, Copy)]
pub struct StepMetrics {
    pub iteration: u64,
    pub l_real: f64,
    pub l_fake: f64,
    pub l_d: f64,
    pub gen_loss: f64,
    pub k: f64,
    pub lr: f64,
}

pub const METRICS_CSV_HEADER: &str = "iter,l_real,l_fake,l_D,gen_loss,k,lr";

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.iteration, self.l_real, self.l_fake, self.l_d, self.gen_loss, self.k, self.lr
        )
    }
}

/// Owner of all mutable training state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub generator: MilNetwork,
    pub discriminator: Option<MilNetwork>,
    pub opt_gen: AdamState,
    pub opt_disc: Option<AdamState>,
    pub adv: AdversarialState,
    pub iteration: u64,
    pub rng: ChaCha8Rng,
    pub cfg: TrainConfig,
    pub pose_cfg: PoseConfig,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, pose_cfg: PoseConfig) -> Result<Self> {
        cfg.validate()?;
        pose_cfg.validate()?;
        let gen_dims = NetworkDims {
            input_dim: pose_cfg.instance_dim(),
            hidden_dim: cfg.hidden_size,
            output_dim: pose_cfg.heatmap_dim(),
            level_count: cfg.level_count,
        };
        let generator = MilNetwork::init(gen_dims, cfg.pooling, cfg.seed)?;
        let (discriminator, opt_disc) = if cfg.adversarial {
            let disc_dims = NetworkDims {
                // heatmap cells are appended to each image patch instance
                input_dim: pose_cfg.instance_dim() + pose_cfg.joint_count,
                hidden_dim: cfg.hidden_size,
                output_dim: pose_cfg.heatmap_dim(),
                level_count: cfg.level_count,
            };
            let disc = MilNetwork::init(disc_dims, cfg.pooling, cfg.seed.wrapping_add(1))?;
            let opt = AdamState::new(disc.param_count());
            (Some(disc), Some(opt))
        } else {
            (None, None)
        };
        let opt_gen = AdamState::new(generator.param_count());
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
        Ok(Trainer {
            generator,
            discriminator,
            opt_gen,
            opt_disc,
            adv: AdversarialState::new(),
            iteration: 0,
            rng,
            cfg,
            pose_cfg,
        })
    }

    pub fn current_lr(&self) -> f64 {
        lr_schedule(
            self.cfg.learning_rate,
            self.iteration,
            self.cfg.decay_every,
            self.cfg.decay_base,
        )
    }

    /// Sample a batch (with replacement) and run one training step.
    pub fn step(&mut self, dataset: &[PoseSample]) -> Result<StepMetrics> {
        if dataset.is_empty() {
            return Err(AmilError::Domain("training dataset is empty".into()));
        }
        let indices: Vec<usize> = (0..self.cfg.batch_size)
            .map(|_| self.rng.gen_range(0..dataset.len()))
            .collect();
        let batch: Vec<&PoseSample> = indices.iter().map(|&i| &dataset[i]).collect();
        self.step_on_batch(&batch)
    }

    /// One alternating update on an explicit batch: discriminator on
    /// `l_real - k l_fake`, generator on L2 plus the adversarial gap, then
    /// the k update.
    pub fn step_on_batch(&mut self, batch: &[&PoseSample]) -> Result<StepMetrics> {
        let lr = self.current_lr();
        let level_count = self.cfg.level_count;
        let level_scale = 1.0 / level_count as f64;
        let batch_scale = 1.0 / batch.len() as f64;

        // Generator forward on every sample.
        let mut gen_bags = Vec::with_capacity(batch.len());
        let mut gen_passes = Vec::with_capacity(batch.len());
        let mut fakes = Vec::with_capacity(batch.len());
        for sample in batch {
            let bag = image_to_bag(&sample.image, self.pose_cfg.image_size, self.pose_cfg.patch_size)?;
            let pass = self.generator.forward(&bag)?;
            fakes.push(mean_scores(&pass.outputs.per_level_scores));
            gen_bags.push(bag);
            gen_passes.push(pass);
        }

        let mut l_real_norm = 0.0;
        let mut l_fake_norm = 0.0;
        let mut l_d = 0.0;
        // Adversarial gradient on each sample's mean heatmap.
        let mut adv_grads: Vec<Option<Vec<f64>>> = vec![None; batch.len()];
        let mut adv_losses = vec![0.0; batch.len()];

        if let (Some(disc), Some(opt_disc)) = (self.discriminator.as_ref(), self.opt_disc.as_mut())
        {
            let mut disc_grads = crate::net::MilGradients::zeros_like(disc);
            let mut l_real_raw = 0.0;
            let mut l_fake_raw = 0.0;
            for (i, sample) in batch.iter().enumerate() {
                // Real pass.
                let real_bag = discriminator_bag(&gen_bags[i], &sample.gt_heatmaps.values, &self.pose_cfg)?;
                let real_pass = disc.forward(&real_bag)?;
                let real_recon = mean_scores(&real_pass.outputs.per_level_scores);
                let real_err: Vec<f64> = sample
                    .gt_heatmaps
                    .values
                    .iter()
                    .zip(real_recon.iter())
                    .map(|(s, r)| s - r)
                    .collect();
                l_real_raw += real_err.iter().map(|e| e * e).sum::<f64>();
                // d l_D / d recon_real = -2 (S - R), spread equally per level.
                let g_real: Vec<f64> = real_err
                    .iter()
                    .map(|e| -2.0 * e * level_scale * batch_scale)
                    .collect();
                let upstream_real = UpstreamGrads {
                    score_grads: vec![g_real; level_count],
                    accum_grad: None,
                };
                let (g, _) = disc.backward(&real_bag, &real_pass, &upstream_real)?;
                disc_grads.add(&g);

                // Fake pass.
                let fake_bag = discriminator_bag(&gen_bags[i], &fakes[i], &self.pose_cfg)?;
                let fake_pass = disc.forward(&fake_bag)?;
                let fake_recon = mean_scores(&fake_pass.outputs.per_level_scores);
                let fake_err: Vec<f64> = fakes[i]
                    .iter()
                    .zip(fake_recon.iter())
                    .map(|(s, r)| s - r)
                    .collect();
                l_fake_raw += fake_err.iter().map(|e| e * e).sum::<f64>();
                // d l_D / d recon_fake = +2 k (S~ - R~)
                let g_fake: Vec<f64> = fake_err
                    .iter()
                    .map(|e| 2.0 * self.adv.k * e * level_scale * batch_scale)
                    .collect();
                let upstream_fake = UpstreamGrads {
                    score_grads: vec![g_fake; level_count],
                    accum_grad: None,
                };
                let (g, _) = disc.backward(&fake_bag, &fake_pass, &upstream_fake)?;
                disc_grads.add(&g);

                // Generator's adversarial objective |S~ - D(S~, X)|^2:
                // the direct term plus the path through the discriminator.
                adv_losses[i] = fake_err.iter().map(|e| e * e).sum::<f64>();
                let g_through: Vec<f64> = fake_err
                    .iter()
                    .map(|e| -2.0 * e * level_scale)
                    .collect();
                let upstream_through = UpstreamGrads {
                    score_grads: vec![g_through; level_count],
                    accum_grad: None,
                };
                let (_, input_grads) = disc.backward(&fake_bag, &fake_pass, &upstream_through)?;
                let mut g_adv: Vec<f64> = fake_err.iter().map(|e| 2.0 * e).collect();
                accumulate_heatmap_grad(&mut g_adv, &input_grads, &self.pose_cfg);
                adv_grads[i] = Some(g_adv);
            }
            l_real_norm = l_real_raw * batch_scale;
            l_fake_norm = l_fake_raw * batch_scale;
            l_d = l_real_norm - self.adv.k * l_fake_norm;
            guard(self.iteration, "l_D", l_d)?;

            let mut params = disc.params_flat();
            opt_disc.update(&mut params, &disc_grads.flat(), lr, self.cfg.weight_decay)?;
            self.discriminator.as_mut().unwrap().set_params_flat(&params);
        }

        // Generator update.
        let mut gen_grads = crate::net::MilGradients::zeros_like(&self.generator);
        let mut gen_loss = 0.0;
        for (i, sample) in batch.iter().enumerate() {
            let pass = &gen_passes[i];
            let gt = &sample.gt_heatmaps.values;
            let mut supervised = 0.0;
            let mut score_grads = Vec::with_capacity(level_count);
            for pred in &pass.outputs.per_level_scores {
                let mut g: Vec<f64> = pred
                    .iter()
                    .zip(gt.iter())
                    .map(|(p, t)| {
                        let e = p - t;
                        supervised += e * e * level_scale;
                        2.0 * e * level_scale * batch_scale
                    })
                    .collect();
                if let Some(g_adv) = &adv_grads[i] {
                    for (gv, ga) in g.iter_mut().zip(g_adv.iter()) {
                        *gv += ga * level_scale * batch_scale;
                    }
                }
                score_grads.push(g);
            }
            gen_loss += (supervised + adv_losses[i]) * batch_scale;
            let upstream = UpstreamGrads {
                score_grads,
                accum_grad: None,
            };
            let (g, _) = self.generator.backward(&gen_bags[i], pass, &upstream)?;
            gen_grads.add(&g);
        }
        guard(self.iteration, "generator loss", gen_loss)?;
        let mut params = self.generator.params_flat();
        self.opt_gen
            .update(&mut params, &gen_grads.flat(), lr, self.cfg.weight_decay)?;
        self.generator.set_params_flat(&params);

        // Balance update (only meaningful in adversarial mode).
        if self.discriminator.is_some() {
            self.adv = update_k(&self.adv, l_real_norm, l_fake_norm, &self.cfg.loss);
        }
        self.iteration += 1;
        Ok(StepMetrics {
            iteration: self.iteration - 1,
            l_real: l_real_norm,
            l_fake: l_fake_norm,
            l_d,
            gen_loss,
            k: self.adv.k,
            lr,
        })
    }
}

fn guard(iteration: u64, what: &'static str, value: f64) -> Result<()> {
    if !value.is_finite() || value.abs() > DIVERGENCE_LIMIT {
        return Err(AmilError::Divergence {
            iteration,
            what,
            value,
        });
    }
    Ok(())
}

/// Build the discriminator's bag: each image patch instance concatenated
/// with the heatmap cell values of its patch for every joint.
pub fn discriminator_bag(
    image_bag: &InstanceBag,
    heatmap: &[f64],
    cfg: &PoseConfig,
) -> Result<InstanceBag> {
    let cells = cfg.grid() * cfg.grid();
    if heatmap.len() != cfg.joint_count * cells {
        return Err(AmilError::Config(format!(
            "heatmap length {} does not match {} joints x {} cells",
            heatmap.len(),
            cfg.joint_count,
            cells
        )));
    }
    let mut instances = Vec::with_capacity(image_bag.len());
    for (k, patch) in image_bag.instances.iter().enumerate() {
        let mut inst = patch.clone();
        for j in 0..cfg.joint_count {
            inst.push(heatmap[j * cells + k]);
        }
        instances.push(inst);
    }
    InstanceBag::new(instances, image_bag.bag_label, image_bag.bag_id)
}

/// Add the heatmap-feature part of discriminator input gradients onto the
/// gradient of the generated heatmap.
fn accumulate_heatmap_grad(g_heatmap: &mut [f64], input_grads: &[Vec<f64>], cfg: &PoseConfig) {
    let base = cfg.instance_dim();
    let cells = cfg.grid() * cfg.grid();
    for (k, g_inst) in input_grads.iter().enumerate() {
        for j in 0..cfg.joint_count {
            g_heatmap[j * cells + k] += g_inst[base + j];
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoint format: magic "AMIL", u32 version, length-prefixed named tensor
// records, trailing u64 checksum (wrapping sum of value bit patterns).
// ---------------------------------------------------------------------------

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AMIL";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serializable snapshot of the whole training state.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    pub generator: MilNetwork,
    pub discriminator: Option<MilNetwork>,
    pub opt_gen: AdamState,
    pub opt_disc: Option<AdamState>,
    pub adv: AdversarialState,
    pub iteration: u64,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
}

impl Trainer {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            generator: self.generator.clone(),
            discriminator: self.discriminator.clone(),
            opt_gen: self.opt_gen.clone(),
            opt_disc: self.opt_disc.clone(),
            adv: self.adv,
            iteration: self.iteration,
            rng_seed: self.rng.get_seed(),
            rng_word_pos: self.rng.get_word_pos(),
        }
    }

    /// Rebuild a trainer from a checkpoint; training resumes bit-for-bit.
    pub fn resume(checkpoint: Checkpoint, cfg: TrainConfig, pose_cfg: PoseConfig) -> Result<Self> {
        cfg.validate()?;
        pose_cfg.validate()?;
        let mut rng = ChaCha8Rng::from_seed(checkpoint.rng_seed);
        rng.set_word_pos(checkpoint.rng_word_pos);
        Ok(Trainer {
            generator: checkpoint.generator,
            discriminator: checkpoint.discriminator,
            opt_gen: checkpoint.opt_gen,
            opt_disc: checkpoint.opt_disc,
            adv: checkpoint.adv,
            iteration: checkpoint.iteration,
            rng,
            cfg,
            pose_cfg,
        })
    }
}

struct TensorWriter {
    buf: Vec<u8>,
    checksum: u64,
}

impl TensorWriter {
    fn new() -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        TensorWriter { buf, checksum: 0 }
    }

    fn tensor(&mut self, name: &str, dims: &[u64], values: &[f64]) {
        let expect: u64 = dims.iter().product();
        assert_eq!(expect as usize, values.len(), "tensor {name} size mismatch");
        self.buf
            .extend_from_slice(&(name.len() as u16).to_le_bytes());
        self.buf.extend_from_slice(name.as_bytes());
        self.buf.push(dims.len() as u8);
        for d in dims {
            self.buf.extend_from_slice(&d.to_le_bytes());
        }
        for v in values {
            let bits = v.to_bits();
            self.checksum = self.checksum.wrapping_add(bits);
            self.buf.extend_from_slice(&bits.to_le_bytes());
        }
    }

    fn finish(mut self) -> Vec<u8> {
        let checksum = self.checksum;
        self.buf.extend_from_slice(&checksum.to_le_bytes());
        self.buf
    }
}

fn network_tensors(w: &mut TensorWriter, prefix: &str, net: &MilNetwork) {
    w.tensor(
        &format!("{prefix}.arch"),
        &[6],
        &[
            net.dims().input_dim as f64,
            net.dims().hidden_dim as f64,
            net.dims().output_dim as f64,
            net.dims().level_count as f64,
            net.pooling.tag() as f64,
            net.pooling.iterations() as f64,
        ],
    );
    for (i, level) in net.levels.iter().enumerate() {
        w.tensor(
            &format!("{prefix}.l{i}.tw"),
            &[level.transform.w.rows() as u64, level.transform.w.cols() as u64],
            level.transform.w.as_slice(),
        );
        w.tensor(
            &format!("{prefix}.l{i}.tb"),
            &[level.transform.b.len() as u64],
            &level.transform.b,
        );
        w.tensor(
            &format!("{prefix}.l{i}.hw"),
            &[level.head.w.rows() as u64, level.head.w.cols() as u64],
            level.head.w.as_slice(),
        );
        w.tensor(
            &format!("{prefix}.l{i}.hb"),
            &[level.head.b.len() as u64],
            &level.head.b,
        );
    }
}

fn adam_tensors(w: &mut TensorWriter, prefix: &str, opt: &AdamState) {
    w.tensor(&format!("{prefix}.m"), &[opt.m.len() as u64], &opt.m);
    w.tensor(&format!("{prefix}.v"), &[opt.v.len() as u64], &opt.v);
    w.tensor(&format!("{prefix}.t"), &[1], &[opt.t as f64]);
}

/// Encode a checkpoint to bytes.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut w = TensorWriter::new();
    w.tensor(
        "state",
        &[5],
        &[
            ckpt.iteration as f64,
            ckpt.adv.k,
            ckpt.adv.step as f64,
            ckpt.adv.last_l_real,
            ckpt.adv.last_l_fake,
        ],
    );
    // RNG state carried as raw bit patterns.
    let mut rng_bits = [0.0f64; 6];
    for (i, chunk) in ckpt.rng_seed.chunks(8).enumerate() {
        rng_bits[i] = f64::from_bits(u64::from_le_bytes(chunk.try_into().unwrap()));
    }
    rng_bits[4] = f64::from_bits(ckpt.rng_word_pos as u64);
    rng_bits[5] = f64::from_bits((ckpt.rng_word_pos >> 64) as u64);
    w.tensor("rng", &[6], &rng_bits);
    network_tensors(&mut w, "gen", &ckpt.generator);
    adam_tensors(&mut w, "opt_gen", &ckpt.opt_gen);
    if let Some(disc) = &ckpt.discriminator {
        network_tensors(&mut w, "disc", disc);
        adam_tensors(&mut w, "opt_disc", ckpt.opt_disc.as_ref().expect("moments"));
    }
    w.finish()
}

struct TensorReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    end: usize,
}

impl<'a> TensorReader<'a> {
    fn err(&self, message: impl Into<String>) -> AmilError {
        AmilError::Parse {
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.end {
            return Err(self.err(format!("unexpected end of data (need {n} bytes)")));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}

type TensorMap = std::collections::BTreeMap<String, (Vec<u64>, Vec<f64>)>;

fn parse_tensors(bytes: &[u8]) -> Result<TensorMap> {
    if bytes.len() < 16 {
        return Err(AmilError::Parse {
            offset: bytes.len() as u64,
            message: "file too short for header and checksum".into(),
        });
    }
    if &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(AmilError::Parse {
            offset: 0,
            message: "bad magic bytes".into(),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(AmilError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mut r = TensorReader {
        bytes,
        pos: 8,
        end: bytes.len() - 8,
    };
    let mut map = TensorMap::new();
    let mut checksum = 0u64;
    while r.pos < r.end {
        let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| r.err("tensor name is not UTF-8"))?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(u64::from_le_bytes(r.take(8)?.try_into().unwrap()));
        }
        let count = dims.iter().product::<u64>() as usize;
        let mut values = Vec::with_capacity(count);
        for _ in 0..count {
            let bits = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
            checksum = checksum.wrapping_add(bits);
            values.push(f64::from_bits(bits));
        }
        map.insert(name, (dims, values));
    }
    let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
    if stored != checksum {
        return Err(AmilError::Parse {
            offset: (bytes.len() - 8) as u64,
            message: format!("checksum mismatch: stored {stored:#x}, computed {checksum:#x}"),
        });
    }
    Ok(map)
}

fn require<'a>(map: &'a TensorMap, name: &str) -> Result<&'a (Vec<u64>, Vec<f64>)> {
    map.get(name).ok_or_else(|| AmilError::Parse {
        offset: 0,
        message: format!("missing tensor {name}"),
    })
}

fn network_from_tensors(map: &TensorMap, prefix: &str) -> Result<MilNetwork> {
    use crate::kernel::DenseMatrix;
    use crate::net::{Level, Linear};
    let (_, arch) = require(map, &format!("{prefix}.arch"))?;
    if arch.len() != 6 {
        return Err(AmilError::Parse {
            offset: 0,
            message: format!("{prefix}.arch has {} entries", arch.len()),
        });
    }
    let level_count = arch[3] as usize;
    let pooling = match arch[4] as u8 {
        0 => PoolingMode::Adjust {
            iterations: arch[5] as usize,
        },
        1 => PoolingMode::Mean,
        2 => PoolingMode::Max,
        other => {
            return Err(AmilError::Parse {
                offset: 0,
                message: format!("unknown pooling tag {other}"),
            })
        }
    };
    let mut levels = Vec::with_capacity(level_count);
    for i in 0..level_count {
        let (tw_dims, tw) = require(map, &format!("{prefix}.l{i}.tw"))?;
        let (_, tb) = require(map, &format!("{prefix}.l{i}.tb"))?;
        let (hw_dims, hw) = require(map, &format!("{prefix}.l{i}.hw"))?;
        let (_, hb) = require(map, &format!("{prefix}.l{i}.hb"))?;
        levels.push(Level {
            transform: Linear {
                w: DenseMatrix::from_vec(tw_dims[0] as usize, tw_dims[1] as usize, tw.clone()),
                b: tb.clone(),
            },
            head: Linear {
                w: DenseMatrix::from_vec(hw_dims[0] as usize, hw_dims[1] as usize, hw.clone()),
                b: hb.clone(),
            },
        });
    }
    Ok(MilNetwork { levels, pooling })
}

fn adam_from_tensors(map: &TensorMap, prefix: &str) -> Result<AdamState> {
    let (_, m) = require(map, &format!("{prefix}.m"))?;
    let (_, v) = require(map, &format!("{prefix}.v"))?;
    let (_, t) = require(map, &format!("{prefix}.t"))?;
    Ok(AdamState {
        m: m.clone(),
        v: v.clone(),
        t: t[0] as u64,
    })
}

/// Decode a checkpoint from bytes.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let map = parse_tensors(bytes)?;
    let (_, state) = require(&map, "state")?;
    if state.len() != 5 {
        return Err(AmilError::Parse {
            offset: 0,
            message: format!("state tensor has {} entries", state.len()),
        });
    }
    let (_, rng_bits) = require(&map, "rng")?;
    let mut rng_seed = [0u8; 32];
    for (i, v) in rng_bits[..4].iter().enumerate() {
        rng_seed[i * 8..(i + 1) * 8].copy_from_slice(&v.to_bits().to_le_bytes());
    }
    let rng_word_pos = (rng_bits[4].to_bits() as u128) | ((rng_bits[5].to_bits() as u128) << 64);
    let generator = network_from_tensors(&map, "gen")?;
    let opt_gen = adam_from_tensors(&map, "opt_gen")?;
    let (discriminator, opt_disc) = if map.contains_key("disc.arch") {
        (
            Some(network_from_tensors(&map, "disc")?),
            Some(adam_from_tensors(&map, "opt_disc")?),
        )
    } else {
        (None, None)
    };
    Ok(Checkpoint {
        version: CHECKPOINT_VERSION,
        generator,
        discriminator,
        opt_gen,
        opt_disc,
        adv: AdversarialState {
            k: state[1],
            step: state[2] as u64,
            last_l_real: state[3],
            last_l_fake: state[4],
        },
        iteration: state[0] as u64,
        rng_seed,
        rng_word_pos,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode_checkpoint(ckpt);
    let mut file = std::fs::File::create(path)
        .map_err(|e| AmilError::io(path.display().to_string(), e))?;
    file.write_all(&bytes)
        .map_err(|e| AmilError::io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| AmilError::io(path.display().to_string(), e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::generate_sample;

    fn tiny_pose_cfg() -> PoseConfig {
        PoseConfig {
            image_size: 32,
            patch_size: 8,
            ..PoseConfig::default()
        }
    }

    fn tiny_train_cfg(adversarial: bool) -> TrainConfig {
        TrainConfig {
            hidden_size: 16,
            batch_size: 2,
            seed: 7,
            adversarial,
            ..TrainConfig::default()
        }
    }

    fn tiny_dataset(n: usize, cfg: &PoseConfig) -> Vec<crate::pose::PoseSample> {
        (0..n).map(|s| generate_sample(s as u64, cfg).unwrap()).collect()
    }

    #[test]
    fn lr_schedule_examples() {
        assert_eq!(lr_schedule(0.001, 0, 20, 0.5), 0.001);
        assert_eq!(lr_schedule(0.001, 19, 20, 0.5), 0.001);
        assert!((lr_schedule(0.001, 40, 20, 0.5) - 0.00025).abs() < 1e-18);
    }

    #[test]
    fn adam_zero_gradient_keeps_params_and_decays_moments() {
        let mut opt = AdamState::new(3);
        opt.m = vec![1.0, 2.0, 3.0];
        opt.v = vec![0.5, 0.5, 0.5];
        let mut params = vec![0.1, -0.2, 0.3];
        let before = params.clone();
        opt.update(&mut params, &[0.0; 3], 0.01, 0.0).unwrap();
        // moments decay geometrically, parameters move by the decayed moment
        assert!((opt.m[0] - ADAM_BETA1).abs() < 1e-15);
        assert!((opt.v[0] - 0.5 * ADAM_BETA2).abs() < 1e-15);
        // the update direction is the (bias-corrected) stale moment, not zero;
        // with a fresh optimizer parameters stay put exactly:
        let mut fresh = AdamState::new(3);
        let mut p2 = before.clone();
        fresh.update(&mut p2, &[0.0; 3], 0.01, 0.0).unwrap();
        assert_eq!(p2, before);
    }

    #[test]
    fn adam_first_step_magnitude() {
        // At t = 1 with gradient g, the bias-corrected update is
        // -lr * g / (|g| + eps), i.e. about lr in magnitude per coordinate.
        let mut opt = AdamState::new(2);
        let mut params = vec![0.0, 0.0];
        opt.update(&mut params, &[0.3, -0.7], 0.01, 0.0).unwrap();
        assert!((params[0] + 0.01).abs() < 1e-6, "{params:?}");
        assert!((params[1] - 0.01).abs() < 1e-6, "{params:?}");
    }

    #[test]
    fn adam_deterministic() {
        let mut a = AdamState::new(4);
        let mut b = AdamState::new(4);
        let mut pa = vec![0.1, 0.2, 0.3, 0.4];
        let mut pb = pa.clone();
        for i in 0..10 {
            let g: Vec<f64> = (0..4).map(|j| ((i * 4 + j) as f64).sin()).collect();
            a.update(&mut pa, &g, 0.01, 0.01).unwrap();
            b.update(&mut pb, &g, 0.01, 0.01).unwrap();
        }
        assert_eq!(pa, pb);
        assert_eq!(a, b);
    }

    #[test]
    fn zero_lr_freezes_parameters_but_k_updates() {
        let pose_cfg = tiny_pose_cfg();
        let mut cfg = tiny_train_cfg(true);
        cfg.learning_rate = 1e-300; // effectively zero but passes validation
        let data = tiny_dataset(4, &pose_cfg);
        let mut trainer = Trainer::new(cfg, pose_cfg).unwrap();
        let before = trainer.generator.params_flat();
        let k_before = trainer.adv.k;
        let metrics = trainer.step(&data).unwrap();
        let after = trainer.generator.params_flat();
        for (a, b) in before.iter().zip(after.iter()) {
            assert!((a - b).abs() < 1e-250);
        }
        // with nonzero real loss and k = 0, k must move up
        assert!(metrics.l_real > 0.0);
        assert!(trainer.adv.k > k_before);
    }

    #[test]
    fn training_is_deterministic() {
        let pose_cfg = tiny_pose_cfg();
        let data = tiny_dataset(6, &pose_cfg);
        let run = || {
            let mut t = Trainer::new(tiny_train_cfg(true), pose_cfg).unwrap();
            let mut rows = Vec::new();
            for _ in 0..10 {
                rows.push(t.step(&data).unwrap().csv_row());
            }
            (t.generator.params_flat(), rows)
        };
        let (p1, r1) = run();
        let (p2, r2) = run();
        assert_eq!(p1, p2);
        assert_eq!(r1, r2);
    }

    #[test]
    fn resume_equivalence() {
        let pose_cfg = tiny_pose_cfg();
        let data = tiny_dataset(6, &pose_cfg);
        let cfg = tiny_train_cfg(true);
        let mut full = Trainer::new(cfg.clone(), pose_cfg).unwrap();
        for _ in 0..10 {
            full.step(&data).unwrap();
        }
        let mut first = Trainer::new(cfg.clone(), pose_cfg).unwrap();
        for _ in 0..5 {
            first.step(&data).unwrap();
        }
        let bytes = encode_checkpoint(&first.checkpoint());
        let restored = decode_checkpoint(&bytes).unwrap();
        let mut second = Trainer::resume(restored, cfg, pose_cfg).unwrap();
        for _ in 0..5 {
            second.step(&data).unwrap();
        }
        assert_eq!(full.generator.params_flat(), second.generator.params_flat());
        assert_eq!(
            full.discriminator.as_ref().unwrap().params_flat(),
            second.discriminator.as_ref().unwrap().params_flat()
        );
        assert_eq!(full.adv, second.adv);
        assert_eq!(full.iteration, second.iteration);
    }

    #[test]
    fn checkpoint_roundtrip_and_errors() {
        let pose_cfg = tiny_pose_cfg();
        let trainer = Trainer::new(tiny_train_cfg(true), pose_cfg).unwrap();
        let ckpt = trainer.checkpoint();
        let bytes = encode_checkpoint(&ckpt);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.generator, ckpt.generator);
        assert_eq!(back.opt_gen, ckpt.opt_gen);
        assert_eq!(back.iteration, ckpt.iteration);
        assert_eq!(back.rng_seed, ckpt.rng_seed);
        assert_eq!(back.rng_word_pos, ckpt.rng_word_pos);
        // byte-stable re-encode
        assert_eq!(encode_checkpoint(&back), bytes);

        // truncation -> parse error
        let truncated = &bytes[..bytes.len() / 2];
        assert!(matches!(
            decode_checkpoint(truncated),
            Err(AmilError::Parse { .. })
        ));

        // version mismatch -> explicit error
        let mut wrong = bytes.clone();
        wrong[4] = 99;
        assert!(matches!(
            decode_checkpoint(&wrong),
            Err(AmilError::Version { found: 99, .. })
        ));

        // corrupt value -> checksum failure with offset
        let mut corrupt = bytes.clone();
        let n = corrupt.len();
        corrupt[n / 2] ^= 0xFF;
        match decode_checkpoint(&corrupt) {
            Err(AmilError::Parse { offset, .. }) => assert!(offset > 0),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn non_adversarial_mode_has_zero_k_and_losses() {
        let pose_cfg = tiny_pose_cfg();
        let data = tiny_dataset(4, &pose_cfg);
        let mut trainer = Trainer::new(tiny_train_cfg(false), pose_cfg).unwrap();
        for _ in 0..5 {
            let m = trainer.step(&data).unwrap();
            assert_eq!(m.k, 0.0);
            assert_eq!(m.l_real, 0.0);
            assert_eq!(m.l_fake, 0.0);
            assert_eq!(m.l_d, 0.0);
        }
    }

    #[test]
    fn overfit_four_samples_drops_loss() {
        let pose_cfg = tiny_pose_cfg();
        let data = tiny_dataset(4, &pose_cfg);
        let mut cfg = tiny_train_cfg(false);
        cfg.batch_size = 4;
        cfg.weight_decay = 0.0;
        cfg.learning_rate = 0.005;
        cfg.decay_every = 1000; // keep the rate flat for this short run
        let mut trainer = Trainer::new(cfg, pose_cfg).unwrap();
        let batch: Vec<&crate::pose::PoseSample> = data.iter().collect();
        let first = trainer.step_on_batch(&batch).unwrap().gen_loss;
        let mut last = first;
        for _ in 0..200 {
            last = trainer.step_on_batch(&batch).unwrap().gen_loss;
        }
        assert!(
            last < 0.5 * first,
            "loss did not drop: first {first}, last {last}"
        );
    }

    #[test]
    fn discriminator_bag_layout() {
        let pose_cfg = tiny_pose_cfg();
        let sample = generate_sample(1, &pose_cfg).unwrap();
        let bag = image_to_bag(&sample.image, pose_cfg.image_size, pose_cfg.patch_size).unwrap();
        let dbag = discriminator_bag(&bag, &sample.gt_heatmaps.values, &pose_cfg).unwrap();
        assert_eq!(dbag.dim(), pose_cfg.instance_dim() + pose_cfg.joint_count);
        // heatmap cell 0 of joint 0 rides on instance 0
        assert_eq!(
            dbag.instances[0][pose_cfg.instance_dim()],
            sample.gt_heatmaps.values[0]
        );
    }
}
