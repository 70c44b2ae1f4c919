//! The multi-instance residual network (MI-RNet).
//!
//! Each level applies a fully connected transform with ReLU to every
//! instance, pools the transformed instances into a bag embedding, and adds
//! it onto the running residual accumulation. A per-level head maps each
//! level's accumulated embedding to that level's prediction; inference takes
//! the unweighted mean of the per-level predictions. The same architecture
//! serves as both the generator and the discriminator.

use crate::error::{AmilError, Result};
use crate::kernel::{relu, DenseMatrix};
use crate::pooling::{
    adjust_pool, adjust_pool_backward, baseline_pool, BaselineMode, InstanceBag, PoolState,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// How each level pools its transformed instances.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolingMode {
    /// Iterative adjust pooling with the given iteration count T.
    Adjust { iterations: usize },
    /// Elementwise mean (standard MIL baseline).
    Mean,
    /// Elementwise max (standard MIL baseline).
    Max,
}

impl PoolingMode {
    pub fn tag(&self) -> u8 {
        match self {
            PoolingMode::Adjust { .. } => 0,
            PoolingMode::Mean => 1,
            PoolingMode::Max => 2,
        }
    }

    pub fn iterations(&self) -> usize {
        match self {
            PoolingMode::Adjust { iterations } => *iterations,
            _ => 0,
        }
    }
}

/// A fully connected layer `y = W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: DenseMatrix,
    pub b: Vec<f64>,
}

impl Linear {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.w.matvec(x);
        for (yv, bv) in y.iter_mut().zip(self.b.iter()) {
            *yv += bv;
        }
        y
    }
}

/// One MI-RNet level: instance transform plus prediction head.
#[derive(Debug, Clone, PartialEq)]
pub struct Level {
    pub transform: Linear,
    pub head: Linear,
}

/// Architecture dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetworkDims {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub level_count: usize,
}

/// Parameters of an MI-RNet.
#[derive(Debug, Clone, PartialEq)]
pub struct MilNetwork {
    pub levels: Vec<Level>,
    pub pooling: PoolingMode,
}

/// Bag-level outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct LevelOutputs {
    /// Pooled embedding of each level, before residual accumulation.
    pub per_level_embeddings: Vec<Vec<f64>>,
    /// Prediction of each level's head on its accumulated embedding.
    pub per_level_scores: Vec<Vec<f64>>,
    /// Final residual-accumulated bag embedding.
    pub accumulated: Vec<f64>,
}

#[derive(Debug, Clone)]
enum PoolTrace {
    Adjust(PoolState),
    Mean,
    /// Per output coordinate, the index of the winning instance.
    Max(Vec<usize>),
}

#[derive(Debug, Clone)]
struct LevelTrace {
    /// Pre-activations of every instance.
    pre: Vec<Vec<f64>>,
    /// ReLU activations (pooling inputs and the next level's inputs).
    act: Vec<Vec<f64>>,
    accum: Vec<f64>,
    pool: PoolTrace,
}

/// Forward state retained for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub outputs: LevelOutputs,
    traces: Vec<LevelTrace>,
}

/// Upstream gradients fed into [`MilNetwork::backward`].
#[derive(Debug, Clone)]
pub struct UpstreamGrads {
    /// One gradient per level's prediction. Use zeros to skip a level.
    pub score_grads: Vec<Vec<f64>>,
    /// Optional gradient on the final accumulated embedding.
    pub accum_grad: Option<Vec<f64>>,
}

impl UpstreamGrads {
    pub fn zeros(net: &MilNetwork) -> Self {
        UpstreamGrads {
            score_grads: net
                .levels
                .iter()
                .map(|l| vec![0.0; l.head.w.rows()])
                .collect(),
            accum_grad: None,
        }
    }
}

/// Parameter gradients, mirroring [`MilNetwork`]'s structure.
#[derive(Debug, Clone)]
pub struct MilGradients {
    pub levels: Vec<LevelGrads>,
}

#[derive(Debug, Clone)]
pub struct LevelGrads {
    pub transform_w: DenseMatrix,
    pub transform_b: Vec<f64>,
    pub head_w: DenseMatrix,
    pub head_b: Vec<f64>,
}

impl MilGradients {
    pub fn zeros_like(net: &MilNetwork) -> Self {
        MilGradients {
            levels: net
                .levels
                .iter()
                .map(|l| LevelGrads {
                    transform_w: DenseMatrix::zeros(l.transform.w.rows(), l.transform.w.cols()),
                    transform_b: vec![0.0; l.transform.b.len()],
                    head_w: DenseMatrix::zeros(l.head.w.rows(), l.head.w.cols()),
                    head_b: vec![0.0; l.head.b.len()],
                })
                .collect(),
        }
    }

    pub fn add(&mut self, other: &MilGradients) {
        for (a, b) in self.levels.iter_mut().zip(other.levels.iter()) {
            for (x, y) in a
                .transform_w
                .as_mut_slice()
                .iter_mut()
                .zip(b.transform_w.as_slice())
            {
                *x += y;
            }
            for (x, y) in a.transform_b.iter_mut().zip(b.transform_b.iter()) {
                *x += y;
            }
            for (x, y) in a.head_w.as_mut_slice().iter_mut().zip(b.head_w.as_slice()) {
                *x += y;
            }
            for (x, y) in a.head_b.iter_mut().zip(b.head_b.iter()) {
                *x += y;
            }
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.levels {
            out.extend_from_slice(l.transform_w.as_slice());
            out.extend_from_slice(&l.transform_b);
            out.extend_from_slice(l.head_w.as_slice());
            out.extend_from_slice(&l.head_b);
        }
        out
    }
}

impl MilNetwork {
    /// Initialize with normal weights of standard deviation `1/sqrt(fan_in)`
    /// and zero biases, reproducibly from the seed.
    pub fn init(dims: NetworkDims, pooling: PoolingMode, seed: u64) -> Result<Self> {
        if dims.input_dim == 0
            || dims.hidden_dim == 0
            || dims.output_dim == 0
            || dims.level_count == 0
        {
            return Err(AmilError::Domain(
                "network dimensions must all be positive".into(),
            ));
        }
        if let PoolingMode::Adjust { iterations } = pooling {
            if iterations == 0 {
                return Err(AmilError::Domain("pool iteration count must be >= 1".into()));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut levels = Vec::with_capacity(dims.level_count);
        for l in 0..dims.level_count {
            let in_dim = if l == 0 { dims.input_dim } else { dims.hidden_dim };
            let transform = random_linear(&mut rng, dims.hidden_dim, in_dim);
            let head = random_linear(&mut rng, dims.output_dim, dims.hidden_dim);
            levels.push(Level { transform, head });
        }
        Ok(MilNetwork { levels, pooling })
    }

    pub fn dims(&self) -> NetworkDims {
        NetworkDims {
            input_dim: self.levels[0].transform.w.cols(),
            hidden_dim: self.levels[0].transform.w.rows(),
            output_dim: self.levels[0].head.w.rows(),
            level_count: self.levels.len(),
        }
    }

    /// Forward pass over one bag, retaining everything backward needs.
    pub fn forward(&self, bag: &InstanceBag) -> Result<ForwardPass> {
        let dims = self.dims();
        if bag.dim() != dims.input_dim {
            return Err(AmilError::Shape {
                context: "bag instance dimension vs first transform",
                left_rows: 1,
                left_cols: bag.dim(),
                right_rows: dims.hidden_dim,
                right_cols: dims.input_dim,
            });
        }
        let mut traces: Vec<LevelTrace> = Vec::with_capacity(self.levels.len());
        let mut embeddings = Vec::new();
        let mut scores = Vec::new();
        let mut accum = vec![0.0; dims.hidden_dim];
        let mut current: Vec<Vec<f64>> = bag.instances.clone();
        for level in &self.levels {
            let pre: Vec<Vec<f64>> = current.iter().map(|x| level.transform.apply(x)).collect();
            let act: Vec<Vec<f64>> = pre
                .iter()
                .map(|z| z.iter().map(|v| relu(*v)).collect())
                .collect();
            let (pooled, pool_trace) = match self.pooling {
                PoolingMode::Adjust { iterations } => {
                    let (s, state) = adjust_pool(&act, iterations)?;
                    (s, PoolTrace::Adjust(state))
                }
                PoolingMode::Mean => {
                    let s = baseline_pool(&act, BaselineMode::Mean)?;
                    (s, PoolTrace::Mean)
                }
                PoolingMode::Max => {
                    let mut winners = vec![0usize; dims.hidden_dim];
                    let mut s = act[0].clone();
                    for (j, inst) in act.iter().enumerate().skip(1) {
                        for (c, v) in inst.iter().enumerate() {
                            if *v > s[c] {
                                s[c] = *v;
                                winners[c] = j;
                            }
                        }
                    }
                    (s, PoolTrace::Max(winners))
                }
            };
            for (a, p) in accum.iter_mut().zip(pooled.iter()) {
                *a += p;
            }
            let score = level.head.apply(&accum);
            embeddings.push(pooled);
            scores.push(score);
            traces.push(LevelTrace {
                pre,
                act: act.clone(),
                accum: accum.clone(),
                pool: pool_trace,
            });
            current = act;
        }
        Ok(ForwardPass {
            outputs: LevelOutputs {
                per_level_embeddings: embeddings,
                per_level_scores: scores,
                accumulated: accum,
            },
            traces,
        })
    }

    /// Unweighted mean of the per-level predictions.
    pub fn infer_score(&self, bag: &InstanceBag) -> Result<Vec<f64>> {
        let pass = self.forward(bag)?;
        Ok(mean_scores(&pass.outputs.per_level_scores))
    }

    /// Exact chain-rule backward pass.
    ///
    /// Returns parameter gradients and the gradients with respect to the raw
    /// input instances.
    pub fn backward(
        &self,
        bag: &InstanceBag,
        pass: &ForwardPass,
        upstream: &UpstreamGrads,
    ) -> Result<(MilGradients, Vec<Vec<f64>>)> {
        let level_count = self.levels.len();
        if pass.traces.len() != level_count {
            return Err(AmilError::State(
                "forward trace does not match network depth".into(),
            ));
        }
        if upstream.score_grads.len() != level_count {
            return Err(AmilError::State(
                "one upstream score gradient required per level".into(),
            ));
        }
        let dims = self.dims();
        let k = bag.len();
        let mut grads = MilGradients::zeros_like(self);
        // dL/daccum_l carried down the residual chain.
        let mut grad_accum = vec![0.0; dims.hidden_dim];
        if let Some(g) = &upstream.accum_grad {
            grad_accum.clone_from(g);
        }
        // dL/dact_l from the transform of level l+1.
        let mut pending_act: Vec<Vec<f64>> = vec![vec![0.0; dims.hidden_dim]; k];
        let mut input_grads = vec![vec![0.0; dims.input_dim]; k];
        for l in (0..level_count).rev() {
            let level = &self.levels[l];
            let trace = &pass.traces[l];
            let lg = &mut grads.levels[l];
            // Head: score_l = head(accum_l).
            let g_score = &upstream.score_grads[l];
            for (r, gs) in g_score.iter().enumerate() {
                lg.head_b[r] += gs;
                for (c, av) in trace.accum.iter().enumerate() {
                    let cur = lg.head_w.get(r, c);
                    lg.head_w.set(r, c, cur + gs * av);
                }
            }
            let g_from_head = level.head.w.matvec_transposed(g_score);
            for (ga, gh) in grad_accum.iter_mut().zip(g_from_head.iter()) {
                *ga += gh;
            }
            // Residual: accum_l = pooled_l + accum_{l-1}; the same gradient
            // flows to both.
            let g_pooled = grad_accum.clone();
            // Pooling backward onto this level's activations.
            let pool_grads: Vec<Vec<f64>> = match &trace.pool {
                PoolTrace::Adjust(state) => adjust_pool_backward(&trace.act, state, &g_pooled)?,
                PoolTrace::Mean => {
                    let scale = 1.0 / k as f64;
                    (0..k)
                        .map(|_| g_pooled.iter().map(|g| g * scale).collect())
                        .collect()
                }
                PoolTrace::Max(winners) => {
                    let mut out = vec![vec![0.0; dims.hidden_dim]; k];
                    for (c, &j) in winners.iter().enumerate() {
                        out[j][c] += g_pooled[c];
                    }
                    out
                }
            };
            // Transform backward per instance.
            let inputs: Vec<&[f64]> = if l == 0 {
                bag.instances.iter().map(|x| x.as_slice()).collect()
            } else {
                pass.traces[l - 1].act.iter().map(|x| x.as_slice()).collect()
            };
            let in_dim = level.transform.w.cols();
            let mut next_pending = vec![vec![0.0; in_dim]; k];
            for j in 0..k {
                // Total gradient on act_lj: pooling path plus next level.
                let mut g_act = pool_grads[j].clone();
                for (ga, gp) in g_act.iter_mut().zip(pending_act[j].iter()) {
                    *ga += gp;
                }
                // ReLU gate.
                let g_z: Vec<f64> = g_act
                    .iter()
                    .zip(trace.pre[j].iter())
                    .map(|(g, z)| if *z > 0.0 { *g } else { 0.0 })
                    .collect();
                for (r, gz) in g_z.iter().enumerate() {
                    if *gz == 0.0 {
                        continue;
                    }
                    lg.transform_b[r] += gz;
                    for (c, xv) in inputs[j].iter().enumerate() {
                        let cur = lg.transform_w.get(r, c);
                        lg.transform_w.set(r, c, cur + gz * xv);
                    }
                }
                let g_in = level.transform.w.matvec_transposed(&g_z);
                if l == 0 {
                    for (a, b) in input_grads[j].iter_mut().zip(g_in.iter()) {
                        *a += b;
                    }
                } else {
                    next_pending[j] = g_in;
                }
            }
            pending_act = next_pending;
            // grad_accum carries unchanged into level l-1 via the residual.
        }
        Ok((grads, input_grads))
    }

    /// All parameters flattened in a fixed order (per level: transform W,
    /// transform b, head W, head b).
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.levels {
            out.extend_from_slice(l.transform.w.as_slice());
            out.extend_from_slice(&l.transform.b);
            out.extend_from_slice(l.head.w.as_slice());
            out.extend_from_slice(&l.head.b);
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) {
        let mut pos = 0;
        for l in &mut self.levels {
            for dst in [
                l.transform.w.as_mut_slice(),
                l.transform.b.as_mut_slice(),
                l.head.w.as_mut_slice(),
                l.head.b.as_mut_slice(),
            ] {
                dst.copy_from_slice(&flat[pos..pos + dst.len()]);
                pos += dst.len();
            }
        }
        assert_eq!(pos, flat.len(), "flat parameter length mismatch");
    }

    pub fn param_count(&self) -> usize {
        self.levels
            .iter()
            .map(|l| {
                l.transform.w.as_slice().len()
                    + l.transform.b.len()
                    + l.head.w.as_slice().len()
                    + l.head.b.len()
            })
            .sum()
    }
}

/// Mean of per-level predictions.
pub fn mean_scores(per_level_scores: &[Vec<f64>]) -> Vec<f64> {
    let levels = per_level_scores.len() as f64;
    let dim = per_level_scores[0].len();
    let mut out = vec![0.0; dim];
    for s in per_level_scores {
        for (o, v) in out.iter_mut().zip(s.iter()) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= levels;
    }
    out
}

fn random_linear(rng: &mut ChaCha8Rng, out_dim: usize, in_dim: usize) -> Linear {
    let std = 1.0 / (in_dim as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("valid normal");
    let data: Vec<f64> = (0..out_dim * in_dim).map(|_| normal.sample(rng)).collect();
    Linear {
        w: DenseMatrix::from_vec(out_dim, in_dim, data),
        b: vec![0.0; out_dim],
    }
}
