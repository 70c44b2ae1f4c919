//! PCK/PCKh keypoint accuracy, tolerance-sweep curves, and joint confusion
//! matrices.

use crate::error::{AmilError, Result};
use crate::pose::{head_segment, torso_segment, KeypointSet};

/// Which skeleton segment normalizes keypoint distances.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalizer {
    /// Torso segment (pelvis to neck/thorax): the PCK convention.
    Torso,
    /// Head segment: the PCKh convention.
    HeadSegment,
}

impl Normalizer {
    fn segment(&self, joint_count: usize) -> Result<(usize, usize)> {
        match self {
            Normalizer::Torso => torso_segment(joint_count),
            Normalizer::HeadSegment => head_segment(joint_count),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Normalizer::Torso => "torso",
            Normalizer::HeadSegment => "head_segment",
        }
    }
}

/// PCK outcome at one tolerance.
#[derive(Debug, Clone)]
pub struct PckResult {
    /// Per-joint fraction of correct detections, indexed by joint.
    pub per_joint_rate: Vec<f64>,
    /// Unweighted mean over joints with at least one visible instance.
    pub mean_rate: f64,
    pub r: f64,
    pub normalizer: Normalizer,
    /// Samples skipped because the normalizing segment had zero length or an
    /// invisible endpoint.
    pub skipped_samples: usize,
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Percentage of correct keypoints at tolerance `r`.
///
/// A joint counts correct when its error, normalized by the segment length,
/// is `<= r` (inclusive). Invisible ground-truth joints are excluded from
/// both numerator and denominator. Samples whose normalizing segment is
/// degenerate are skipped and counted in the result.
pub fn pck(
    pred: &[KeypointSet],
    gt: &[KeypointSet],
    r: f64,
    normalizer: Normalizer,
) -> Result<PckResult> {
    if pred.len() != gt.len() {
        return Err(AmilError::Shape {
            context: "pck prediction/ground-truth lists",
            left_rows: pred.len(),
            left_cols: 0,
            right_rows: gt.len(),
            right_cols: 0,
        });
    }
    if pred.is_empty() {
        return Err(AmilError::Domain("pck over empty sample list".into()));
    }
    if !(r > 0.0 && r <= 1.0) {
        return Err(AmilError::Domain(format!("tolerance r = {r} outside (0, 1]")));
    }
    let j = gt[0].len();
    let (seg_a, seg_b) = normalizer.segment(j)?;
    let mut correct = vec![0usize; j];
    let mut total = vec![0usize; j];
    let mut skipped = 0;
    for (p, g) in pred.iter().zip(gt.iter()) {
        if p.len() != j || g.len() != j {
            return Err(AmilError::Shape {
                context: "pck keypoint counts",
                left_rows: p.len(),
                left_cols: 0,
                right_rows: g.len(),
                right_cols: 0,
            });
        }
        let seg_len = dist(g.joints[seg_a], g.joints[seg_b]);
        if seg_len == 0.0 || !g.visible[seg_a] || !g.visible[seg_b] {
            skipped += 1;
            continue;
        }
        for i in 0..j {
            if !g.visible[i] {
                continue;
            }
            total[i] += 1;
            if dist(p.joints[i], g.joints[i]) / seg_len <= r {
                correct[i] += 1;
            }
        }
    }
    let mut per_joint_rate = vec![0.0; j];
    let mut mean = 0.0;
    let mut counted = 0;
    for i in 0..j {
        if total[i] > 0 {
            per_joint_rate[i] = correct[i] as f64 / total[i] as f64;
            mean += per_joint_rate[i];
            counted += 1;
        }
    }
    if counted > 0 {
        mean /= counted as f64;
    }
    Ok(PckResult {
        per_joint_rate,
        mean_rate: mean,
        r,
        normalizer,
        skipped_samples: skipped,
    })
}

/// PCK at each tolerance in `r_values` (must be ascending).
pub fn pck_curve(
    pred: &[KeypointSet],
    gt: &[KeypointSet],
    r_values: &[f64],
    normalizer: Normalizer,
) -> Result<Vec<PckResult>> {
    if r_values.windows(2).any(|w| w[0] > w[1]) {
        return Err(AmilError::Domain("r_values must be sorted ascending".into()));
    }
    r_values
        .iter()
        .map(|&r| pck(pred, gt, r, normalizer))
        .collect()
}

/// Joint confusion matrix.
///
/// Entry `(i, j)` counts predictions for joint `i` whose nearest visible
/// ground-truth joint within `assignment_radius` is joint `j`; the extra
/// final column counts misses.
#[derive(Debug, Clone)]
pub struct ConfusionMatrix {
    pub joint_count: usize,
    /// Row-major `(joint_count) x (joint_count + 1)` counts; the last column
    /// is the miss column.
    pub counts: Vec<usize>,
}

impl ConfusionMatrix {
    pub fn get(&self, pred_joint: usize, gt_joint: usize) -> usize {
        self.counts[pred_joint * (self.joint_count + 1) + gt_joint]
    }

    pub fn misses(&self, pred_joint: usize) -> usize {
        self.get(pred_joint, self.joint_count)
    }

    pub fn row_sum(&self, pred_joint: usize) -> usize {
        let w = self.joint_count + 1;
        self.counts[pred_joint * w..(pred_joint + 1) * w].iter().sum()
    }
}

pub fn confusion(
    pred: &[KeypointSet],
    gt: &[KeypointSet],
    assignment_radius: f64,
) -> Result<ConfusionMatrix> {
    if pred.len() != gt.len() {
        return Err(AmilError::Shape {
            context: "confusion prediction/ground-truth lists",
            left_rows: pred.len(),
            left_cols: 0,
            right_rows: gt.len(),
            right_cols: 0,
        });
    }
    if pred.is_empty() {
        return Err(AmilError::Domain("confusion over empty sample list".into()));
    }
    let j = gt[0].len();
    let w = j + 1;
    let mut counts = vec![0usize; j * w];
    for (p, g) in pred.iter().zip(gt.iter()) {
        for i in 0..j {
            let mut best: Option<(usize, f64)> = None;
            for cand in 0..j {
                if !g.visible[cand] {
                    continue;
                }
                let d = dist(p.joints[i], g.joints[cand]);
                if d <= assignment_radius && best.map_or(true, |(_, bd)| d < bd) {
                    best = Some((cand, d));
                }
            }
            match best {
                Some((cand, _)) => counts[i * w + cand] += 1,
                None => counts[i * w + j] += 1,
            }
        }
    }
    Ok(ConfusionMatrix {
        joint_count: j,
        counts,
    })
}

/// CSV rendering of a PCK result: `joint,rate` rows plus a `mean` row.
pub fn pck_to_csv(result: &PckResult, joint_names: &[&str]) -> String {
    let mut out = String::from("joint,rate\n");
    for (i, rate) in result.per_joint_rate.iter().enumerate() {
        let name = joint_names.get(i).copied().unwrap_or("?");
        out.push_str(&format!("{name},{rate}\n"));
    }
    out.push_str(&format!("mean,{}\n", result.mean_rate));
    out
}

/// JSON rendering of a PCK result mirroring [`PckResult`]'s fields.
pub fn pck_to_json(result: &PckResult) -> String {
    let rates: Vec<String> = result.per_joint_rate.iter().map(|r| format!("{r}")).collect();
    format!(
        "{{\"per_joint_rate\":[{}],\"mean_rate\":{},\"r\":{},\"normalizer\":\"{}\",\"skipped_samples\":{}}}",
        rates.join(","),
        result.mean_rate,
        result.r,
        result.normalizer.label(),
        result.skipped_samples
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::{generate_sample, PoseConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gt_sets(n: usize) -> Vec<KeypointSet> {
        let cfg = PoseConfig::default();
        (0..n)
            .map(|s| generate_sample(s as u64, &cfg).unwrap().keypoints)
            .collect()
    }

    #[test]
    fn perfect_predictions_score_one() {
        let gt = gt_sets(20);
        let res = pck(&gt, &gt, 0.05, Normalizer::Torso).unwrap();
        assert!(res.per_joint_rate.iter().all(|r| *r == 1.0));
        assert_eq!(res.mean_rate, 1.0);
        let resh = pck(&gt, &gt, 0.05, Normalizer::HeadSegment).unwrap();
        assert_eq!(resh.mean_rate, 1.0);
    }

    #[test]
    fn boundary_displacement_is_inclusive() {
        // Exact-arithmetic skeleton: torso length 8, every joint displaced by
        // exactly r * 8 = 2 pixels.
        let gt = vec![KeypointSet {
            joints: vec![(0.0, -2.0), (0.0, 0.0), (0.0, 8.0), (4.0, 2.0), (-4.0, 2.0), (2.0, 14.0), (-2.0, 14.0)],
            visible: vec![true; 7],
        }];
        let r = 0.25;
        let pred = vec![KeypointSet {
            joints: gt[0].joints.iter().map(|&(x, y)| (x + 2.0, y)).collect(),
            visible: gt[0].visible.clone(),
        }];
        let res = pck(&pred, &gt, r, Normalizer::Torso).unwrap();
        assert_eq!(res.mean_rate, 1.0, "boundary must be inclusive");
    }

    #[test]
    fn hand_computed_threshold() {
        // Torso length 10, joint error 2.5: incorrect at r=0.2, correct at r=0.25.
        let gt = vec![KeypointSet {
            joints: vec![(0.0, 10.0), (0.0, 0.0), (0.0, 10.0), (5.0, 5.0), (6.0, 5.0), (1.0, 15.0), (2.0, 15.0)],
            visible: vec![true; 7],
        }];
        // torso: pelvis (idx 2) to neck (idx 1) = length 10
        let mut pred = gt.clone();
        pred[0].joints[3] = (7.5, 5.0); // error 2.5 on lhand
        let r02 = pck(&pred, &gt, 0.2, Normalizer::Torso).unwrap();
        assert!((r02.per_joint_rate[3] - 0.0).abs() < 1e-15);
        let r025 = pck(&pred, &gt, 0.25, Normalizer::Torso).unwrap();
        assert_eq!(r025.per_joint_rate[3], 1.0);
    }

    #[test]
    fn brute_force_oracle_agreement() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let gt = gt_sets(50);
        let pred: Vec<KeypointSet> = gt
            .iter()
            .map(|g| KeypointSet {
                joints: g
                    .joints
                    .iter()
                    .map(|&(x, y)| {
                        (x + rng.gen_range(-6.0..6.0), y + rng.gen_range(-6.0..6.0))
                    })
                    .collect(),
                visible: g.visible.clone(),
            })
            .collect();
        let r = 0.3;
        let res = pck(&pred, &gt, r, Normalizer::Torso).unwrap();
        // independent brute-force count
        let (a, b) = crate::pose::torso_segment(7).unwrap();
        for joint in 0..7 {
            let mut correct = 0;
            let mut total = 0;
            for (p, g) in pred.iter().zip(gt.iter()) {
                let seg = dist(g.joints[a], g.joints[b]);
                if seg == 0.0 {
                    continue;
                }
                if !g.visible[joint] {
                    continue;
                }
                total += 1;
                if dist(p.joints[joint], g.joints[joint]) <= r * seg {
                    correct += 1;
                }
            }
            assert_eq!(res.per_joint_rate[joint], correct as f64 / total as f64);
        }
    }

    #[test]
    fn curve_monotone_and_translation_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let gt = gt_sets(30);
        let pred: Vec<KeypointSet> = gt
            .iter()
            .map(|g| KeypointSet {
                joints: g
                    .joints
                    .iter()
                    .map(|&(x, y)| (x + rng.gen_range(-8.0..8.0), y + rng.gen_range(-8.0..8.0)))
                    .collect(),
                visible: g.visible.clone(),
            })
            .collect();
        let rs: Vec<f64> = (1..=20).map(|i| i as f64 * 0.05).collect();
        let curve = pck_curve(&pred, &gt, &rs, Normalizer::Torso).unwrap();
        for w in curve.windows(2) {
            assert!(w[0].mean_rate <= w[1].mean_rate + 1e-15);
            for (a, b) in w[0].per_joint_rate.iter().zip(w[1].per_joint_rate.iter()) {
                assert!(a <= &(b + 1e-15));
            }
        }
        // translation + uniform scaling of both sets leaves PCK unchanged
        let transform = |ks: &KeypointSet| KeypointSet {
            joints: ks.joints.iter().map(|&(x, y)| (3.0 * x + 11.0, 3.0 * y - 4.0)).collect(),
            visible: ks.visible.clone(),
        };
        let pred_t: Vec<KeypointSet> = pred.iter().map(transform).collect();
        let gt_t: Vec<KeypointSet> = gt.iter().map(transform).collect();
        let base = pck(&pred, &gt, 0.35, Normalizer::Torso).unwrap();
        let moved = pck(&pred_t, &gt_t, 0.35, Normalizer::Torso).unwrap();
        for (a, b) in base.per_joint_rate.iter().zip(moved.per_joint_rate.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((base.mean_rate - moved.mean_rate).abs() < 1e-12);
    }

    #[test]
    fn curve_empty_r_values() {
        let gt = gt_sets(2);
        let curve = pck_curve(&gt, &gt, &[], Normalizer::Torso).unwrap();
        assert!(curve.is_empty());
    }

    #[test]
    fn single_misplaced_joint_step_crossing() {
        let gt = gt_sets(1);
        let (a, b) = crate::pose::torso_segment(7).unwrap();
        let seg = dist(gt[0].joints[a], gt[0].joints[b]);
        let mut pred = gt.clone();
        // displace the head by 0.4 * segment
        pred[0].joints[0].0 += 0.4 * seg;
        let rs = [0.1, 0.2, 0.3, 0.39, 0.41, 0.5, 0.6];
        let curve = pck_curve(&pred, &gt, &rs, Normalizer::Torso).unwrap();
        for res in &curve {
            let expect = if res.r >= 0.4 { 1.0 } else { 6.0 / 7.0 };
            assert!((res.mean_rate - expect).abs() < 1e-12, "r={}", res.r);
        }
    }

    #[test]
    fn degenerate_normalizer_skips_and_counts() {
        let mut gt = gt_sets(3);
        // collapse the torso of one sample
        gt[1].joints[2] = gt[1].joints[1];
        let res = pck(&gt, &gt, 0.5, Normalizer::Torso).unwrap();
        assert_eq!(res.skipped_samples, 1);
        assert_eq!(res.mean_rate, 1.0);
    }

    #[test]
    fn misaligned_lists_rejected() {
        let gt = gt_sets(2);
        assert!(pck(&gt[..1], &gt, 0.5, Normalizer::Torso).is_err());
        assert!(pck(&gt, &gt, 0.0, Normalizer::Torso).is_err());
    }

    #[test]
    fn confusion_diagonal_swap_and_miss() {
        let gt = gt_sets(10);
        // identity
        let m = confusion(&gt, &gt, 1.0).unwrap();
        for i in 0..7 {
            assert_eq!(m.get(i, i), 10);
            assert_eq!(m.row_sum(i), 10);
        }
        // swapped hands land on the cross entries
        let swapped: Vec<KeypointSet> = gt
            .iter()
            .map(|g| {
                let mut joints = g.joints.clone();
                joints.swap(3, 4);
                KeypointSet {
                    joints,
                    visible: g.visible.clone(),
                }
            })
            .collect();
        let ms = confusion(&swapped, &gt, 1.0).unwrap();
        assert_eq!(ms.get(3, 4), 10);
        assert_eq!(ms.get(4, 3), 10);
        // far-field predictions all miss
        let far: Vec<KeypointSet> = gt
            .iter()
            .map(|g| KeypointSet {
                joints: vec![(1e6, 1e6); g.len()],
                visible: g.visible.clone(),
            })
            .collect();
        let mf = confusion(&far, &gt, 5.0).unwrap();
        for i in 0..7 {
            assert_eq!(mf.misses(i), 10);
            assert_eq!(mf.row_sum(i), 10);
        }
    }

    #[test]
    fn csv_and_json_render() {
        let gt = gt_sets(3);
        let res = pck(&gt, &gt, 0.2, Normalizer::Torso).unwrap();
        let csv = pck_to_csv(&res, &crate::pose::JOINTS_7);
        assert!(csv.starts_with("joint,rate\n"));
        assert!(csv.contains("head,1\n"));
        assert!(csv.ends_with("mean,1\n"));
        let json = pck_to_json(&res);
        assert!(json.contains("\"mean_rate\":1"));
        assert!(json.contains("\"normalizer\":\"torso\""));
    }
}
