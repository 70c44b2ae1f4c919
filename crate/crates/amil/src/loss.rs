//! Training objectives: margin loss on the bag-embedding norm, the MIL bag
//! probability model with coupled bag/instance cross-entropies, and the
//! adversarial reconstruction losses with the k-balance controller.

use crate::error::{AmilError, Result};

/// Probability clamp applied before any logarithm.
pub const PROB_EPS: f64 = 1e-7;

/// Loss hyperparameters.
///
/// The probability-model constant and the gap Lagrange multiplier share the
/// symbol lambda in the literature but are distinct knobs here; both default
/// to 1.
#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    pub m_plus: f64,
    pub m_minus: f64,
    /// Rate constant in the instance probability `1 - exp(-lambda h)`.
    pub lambda_prob: f64,
    /// Lagrange multiplier on the squared bag/instance loss gap.
    pub lambda_gap: f64,
    /// Equilibrium target factor in the k update.
    pub gamma: f64,
    /// Step size of the k update.
    pub omega_k: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            m_plus: 0.9,
            m_minus: 0.1,
            lambda_prob: 1.0,
            lambda_gap: 1.0,
            gamma: 0.5,
            omega_k: 0.001,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.m_minus && self.m_minus < self.m_plus && self.m_plus <= 1.0) {
            return Err(AmilError::Config(format!(
                "margins must satisfy 0 <= m_minus < m_plus <= 1, got {} and {}",
                self.m_minus, self.m_plus
            )));
        }
        if self.lambda_prob <= 0.0 || self.lambda_gap <= 0.0 {
            return Err(AmilError::Config("lambda values must be > 0".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(AmilError::Config("gamma must be in (0, 1]".into()));
        }
        if self.omega_k <= 0.0 {
            return Err(AmilError::Config("omega_k must be > 0".into()));
        }
        Ok(())
    }
}

/// Balance-control state for adversarial training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdversarialState {
    pub k: f64,
    pub step: u64,
    pub last_l_real: f64,
    pub last_l_fake: f64,
}

impl AdversarialState {
    pub fn new() -> Self {
        AdversarialState {
            k: 0.0,
            step: 0,
            last_l_real: 0.0,
            last_l_fake: 0.0,
        }
    }
}

impl Default for AdversarialState {
    fn default() -> Self {
        Self::new()
    }
}

/// Hinge-squared margin loss on the bag-embedding norm.
pub fn margin_loss(bag_norm: f64, label: u8, cfg: &LossConfig) -> Result<f64> {
    if !(0.0..1.0).contains(&bag_norm) {
        return Err(AmilError::Domain(format!(
            "bag norm {bag_norm} outside [0, 1)"
        )));
    }
    let y = label as f64;
    let pos = (cfg.m_plus - bag_norm).max(0.0);
    let neg = (bag_norm - cfg.m_minus).max(0.0);
    Ok(y * pos * pos + (1.0 - y) * neg * neg)
}

/// Derivative of [`margin_loss`] with respect to the bag norm.
pub fn margin_loss_grad(bag_norm: f64, label: u8, cfg: &LossConfig) -> f64 {
    if label == 1 {
        -2.0 * (cfg.m_plus - bag_norm).max(0.0)
    } else {
        2.0 * (bag_norm - cfg.m_minus).max(0.0)
    }
}

/// Instance probability `p = 1 - exp(-lambda h)` for a nonnegative score.
pub fn instance_prob(h: f64, lambda: f64) -> Result<f64> {
    if h < 0.0 {
        return Err(AmilError::Domain(format!("instance score {h} < 0")));
    }
    Ok(1.0 - (-lambda * h).exp())
}

/// Probability that a bag is negative: the product of instance complements.
pub fn bag_prob_negative(instance_probs: &[f64]) -> Result<f64> {
    let mut prod = 1.0;
    for &p in instance_probs {
        if !(0.0..=1.0).contains(&p) {
            return Err(AmilError::Domain(format!("probability {p} outside [0, 1]")));
        }
        prod *= 1.0 - p;
    }
    Ok(prod)
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

fn instance_loss(q: f64, u: f64) -> f64 {
    let qc = clamp_prob(q);
    -u * qc.ln() - (1.0 - u) * (1.0 - qc).ln()
}

/// Pseudo-label for an instance probability; ties at 0.5 take the positive
/// label.
fn pseudo_label(q: f64) -> f64 {
    if q >= 0.5 {
        1.0
    } else {
        0.0
    }
}

/// Coupled bag/instance loss.
///
/// Positive bags pay the bag cross-entropy plus the squared gap between it
/// and the mean instance loss (pseudo-labels from thresholding at 0.5);
/// negative bags pay the mean instance loss with all-zero labels.
pub fn coupled_bag_loss(
    bag_prob: f64,
    instance_probs: &[f64],
    label: u8,
    cfg: &LossConfig,
) -> Result<f64> {
    if instance_probs.is_empty() {
        return Err(AmilError::Domain(
            "coupled_bag_loss requires at least one instance".into(),
        ));
    }
    let n = instance_probs.len() as f64;
    if label == 0 {
        let mean: f64 = instance_probs.iter().map(|&q| instance_loss(q, 0.0)).sum::<f64>() / n;
        Ok(mean)
    } else {
        let loss_bag = -clamp_prob(bag_prob).ln();
        let mean_if: f64 = instance_probs
            .iter()
            .map(|&q| instance_loss(q, pseudo_label(q)))
            .sum::<f64>()
            / n;
        let gap = loss_bag - mean_if;
        Ok(loss_bag + cfg.lambda_gap * gap * gap)
    }
}

/// Coupled loss evaluated directly on nonnegative instance scores `h`, with
/// its gradient with respect to `h`.
///
/// The bag probability is `1 - prod_j (1 - q_j)` with `q_j` from
/// [`instance_prob`]; pseudo-labels are treated as constants. Clamped
/// coordinates contribute zero gradient.
pub fn coupled_loss_from_scores(
    scores: &[f64],
    label: u8,
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    if scores.is_empty() {
        return Err(AmilError::Domain(
            "coupled_loss_from_scores requires at least one instance".into(),
        ));
    }
    let lambda = cfg.lambda_prob;
    let q: Vec<f64> = scores
        .iter()
        .map(|&h| instance_prob(h, lambda))
        .collect::<Result<_>>()?;
    let p_neg = bag_prob_negative(&q)?;
    let p = 1.0 - p_neg;
    let loss = coupled_bag_loss(p, &q, label, cfg)?;

    let n = q.len() as f64;
    // dq_j/dh_j = lambda * exp(-lambda h_j) = lambda * (1 - q_j)
    let dq_dh: Vec<f64> = q.iter().map(|&qj| lambda * (1.0 - qj)).collect();
    let mut grad = vec![0.0; q.len()];
    if label == 0 {
        for (j, &qj) in q.iter().enumerate() {
            let qc = clamp_prob(qj);
            let d_if = if (PROB_EPS..=1.0 - PROB_EPS).contains(&qj) {
                1.0 / (1.0 - qc)
            } else {
                0.0
            };
            grad[j] = d_if / n * dq_dh[j];
        }
    } else {
        let pc = clamp_prob(p);
        let d_lb_dp = if (PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
            -1.0 / pc
        } else {
            0.0
        };
        let loss_bag = -pc.ln();
        let mean_if: f64 =
            q.iter().map(|&qj| instance_loss(qj, pseudo_label(qj))).sum::<f64>() / n;
        let gap = loss_bag - mean_if;
        for (j, &qj) in q.iter().enumerate() {
            // dp/dq_j = prod_{k != j} (1 - q_k)
            let others = if (1.0 - qj).abs() > 1e-300 {
                p_neg / (1.0 - qj)
            } else {
                q.iter()
                    .enumerate()
                    .filter(|(k, _)| *k != j)
                    .map(|(_, &qk)| 1.0 - qk)
                    .product()
            };
            let d_lb_dq = d_lb_dp * others;
            let u = pseudo_label(qj);
            let qc = clamp_prob(qj);
            let d_if_dq = if (PROB_EPS..=1.0 - PROB_EPS).contains(&qj) {
                -u / qc + (1.0 - u) / (1.0 - qc)
            } else {
                0.0
            };
            let df_dq = d_lb_dq * (1.0 + 2.0 * cfg.lambda_gap * gap)
                - 2.0 * cfg.lambda_gap * gap * d_if_dq / n;
            grad[j] = df_dq * dq_dh[j];
        }
    }
    Ok((loss, grad))
}

/// Sum of squared per-pixel errors over a batch of flattened heatmaps.
fn batch_sse(a: &[Vec<f64>], b: &[Vec<f64>], context: &'static str) -> Result<f64> {
    if a.len() != b.len() {
        return Err(AmilError::Shape {
            context,
            left_rows: a.len(),
            left_cols: a.first().map_or(0, |v| v.len()),
            right_rows: b.len(),
            right_cols: b.first().map_or(0, |v| v.len()),
        });
    }
    let mut total = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        if x.len() != y.len() {
            return Err(AmilError::Shape {
                context,
                left_rows: a.len(),
                left_cols: x.len(),
                right_rows: b.len(),
                right_cols: y.len(),
            });
        }
        for (xv, yv) in x.iter().zip(y.iter()) {
            let d = xv - yv;
            total += d * d;
        }
    }
    Ok(total)
}

/// Discriminator reconstruction losses: `l_real`, `l_fake`, and
/// `l_D = l_real - k * l_fake` (raw sums over the batch).
pub fn discriminator_losses(
    real_hm: &[Vec<f64>],
    real_recon: &[Vec<f64>],
    fake_hm: &[Vec<f64>],
    fake_recon: &[Vec<f64>],
    state: &AdversarialState,
) -> Result<(f64, f64, f64)> {
    let l_real = batch_sse(real_hm, real_recon, "discriminator real batch")?;
    let l_fake = batch_sse(fake_hm, fake_recon, "discriminator fake batch")?;
    let l_d = l_real - state.k * l_fake;
    Ok((l_real, l_fake, l_d))
}

/// Balance-variable update `k' = clamp(k + omega_k (gamma l_real - l_fake))`.
pub fn update_k(
    state: &AdversarialState,
    l_real: f64,
    l_fake: f64,
    cfg: &LossConfig,
) -> AdversarialState {
    let k = (state.k + cfg.omega_k * (cfg.gamma * l_real - l_fake)).clamp(0.0, 1.0);
    AdversarialState {
        k,
        step: state.step + 1,
        last_l_real: l_real,
        last_l_fake: l_fake,
    }
}

/// Generator objective: L2 to ground truth plus the adversarial
/// self-reconstruction gap.
pub fn generator_loss(
    fake_hm: &[Vec<f64>],
    gt_hm: &[Vec<f64>],
    fake_recon: &[Vec<f64>],
) -> Result<f64> {
    let l2 = batch_sse(fake_hm, gt_hm, "generator L2 batch")?;
    let adv = batch_sse(fake_hm, fake_recon, "generator adversarial batch")?;
    Ok(l2 + adv)
}
