//! Adjust pooling: iterative weighted-sum pooling over a bag of instance
//! embeddings with a squash nonlinearity, plus mean/max baselines.
//!
//! One forward pass runs `T` refinement iterations. Iteration `t` computes
//! weights `w = softmax(b)`, the weighted sum `sigma = sum_i w_i f_i`, the
//! squashed embedding `s = squash(sigma)`, then updates the provisional
//! weights `b_i += f_i . s`. At `t = 1` all `b` are zero, so adjust pooling
//! starts from mean pooling. The backward pass unrolls all `T` iterations
//! exactly; it is audited against central finite differences.

use crate::error::{AmilError, Result};
use crate::kernel::{dot, l2_norm, softmax, softmax_vjp};

/// A bag of instance feature vectors with a bag-level label.
#[derive(Debug, Clone)]
pub struct InstanceBag {
    pub instances: Vec<Vec<f64>>,
    pub bag_label: u8,
    pub bag_id: u64,
}

impl InstanceBag {
    pub fn new(instances: Vec<Vec<f64>>, bag_label: u8, bag_id: u64) -> Result<Self> {
        if instances.is_empty() {
            return Err(AmilError::Domain("bag must be nonempty".into()));
        }
        let d = instances[0].len();
        if instances.iter().any(|x| x.len() != d) {
            return Err(AmilError::Domain(
                "all instances in a bag must share one dimension".into(),
            ));
        }
        Ok(InstanceBag {
            instances,
            bag_label,
            bag_id,
        })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.instances[0].len()
    }
}

/// Per-iteration record kept for backpropagation.
#[derive(Debug, Clone)]
pub struct PoolIteration {
    /// Provisional weights `b` entering this iteration.
    pub b: Vec<f64>,
    /// Softmax weights `w = softmax(b)`.
    pub w: Vec<f64>,
    /// Weighted sum `sigma = sum_i w_i f_i`.
    pub sigma: Vec<f64>,
    /// Squashed embedding `s = squash(sigma)`.
    pub s: Vec<f64>,
}

/// Full forward state of one adjust-pooling evaluation.
#[derive(Debug, Clone)]
pub struct PoolState {
    pub iterations: Vec<PoolIteration>,
}

impl PoolState {
    /// Final pooled embedding.
    pub fn embedding(&self) -> &[f64] {
        &self.iterations.last().expect("at least one iteration").s
    }
}

/// Norm-bounded nonlinearity: `s = (|sigma|^2 / (1 + |sigma|^2)) * sigma/|sigma|`.
///
/// The zero vector maps to the zero vector by the continuous limit.
pub fn squash(sigma: &[f64]) -> Vec<f64> {
    let n = l2_norm(sigma);
    if n == 0.0 {
        return vec![0.0; sigma.len()];
    }
    // (n^2/(1+n^2)) / n = n/(1+n^2)
    let scale = n / (1.0 + n * n);
    sigma.iter().map(|x| x * scale).collect()
}

/// Vector-Jacobian product of `squash` at `sigma` with upstream `g`.
pub fn squash_vjp(sigma: &[f64], g: &[f64]) -> Vec<f64> {
    let n = l2_norm(sigma);
    if n == 0.0 {
        // s ~ |sigma| * sigma near zero, so the Jacobian vanishes there.
        return vec![0.0; sigma.len()];
    }
    let denom = 1.0 + n * n;
    let a = n / denom;
    let a_prime = (1.0 - n * n) / (denom * denom);
    let sg = dot(sigma, g);
    sigma
        .iter()
        .zip(g.iter())
        .map(|(si, gi)| a * gi + (a_prime / n) * sg * si)
        .collect()
}

/// Mean/max baseline pooling modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineMode {
    Mean,
    Max,
}

/// Elementwise mean or max of the instance embeddings.
pub fn baseline_pool(bag_embeddings: &[Vec<f64>], mode: BaselineMode) -> Result<Vec<f64>> {
    if bag_embeddings.is_empty() {
        return Err(AmilError::Domain("baseline_pool of empty bag".into()));
    }
    let d = bag_embeddings[0].len();
    match mode {
        BaselineMode::Mean => {
            // Accumulate (1/k)-weighted terms in instance order, matching the
            // uniform-weight first iteration of adjust pooling bit-for-bit.
            let w = 1.0 / bag_embeddings.len() as f64;
            let mut out = vec![0.0; d];
            for inst in bag_embeddings {
                for (o, x) in out.iter_mut().zip(inst.iter()) {
                    *o += w * x;
                }
            }
            Ok(out)
        }
        BaselineMode::Max => {
            let mut out = bag_embeddings[0].clone();
            for inst in &bag_embeddings[1..] {
                for (o, x) in out.iter_mut().zip(inst.iter()) {
                    if *x > *o {
                        *o = *x;
                    }
                }
            }
            Ok(out)
        }
    }
}

/// Run `iterations` rounds of adjust pooling over the instance embeddings.
///
/// Returns the final embedding and the full per-iteration state.
pub fn adjust_pool(
    bag_embeddings: &[Vec<f64>],
    iterations: usize,
) -> Result<(Vec<f64>, PoolState)> {
    if bag_embeddings.is_empty() {
        return Err(AmilError::Domain("adjust_pool of empty bag".into()));
    }
    if iterations == 0 {
        return Err(AmilError::Domain("adjust_pool requires T >= 1".into()));
    }
    let k = bag_embeddings.len();
    let mut b = vec![0.0; k];
    let mut records = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let w = softmax(&b)?;
        let d = bag_embeddings[0].len();
        let mut sigma = vec![0.0; d];
        for (wi, inst) in w.iter().zip(bag_embeddings.iter()) {
            for (sv, x) in sigma.iter_mut().zip(inst.iter()) {
                *sv += wi * x;
            }
        }
        let s = squash(&sigma);
        let b_in = b.clone();
        for (bi, inst) in b.iter_mut().zip(bag_embeddings.iter()) {
            *bi += dot(inst, &s);
        }
        records.push(PoolIteration {
            b: b_in,
            w,
            sigma,
            s,
        });
    }
    let state = PoolState {
        iterations: records,
    };
    Ok((state.embedding().to_vec(), state))
}

/// Gradient of the final pooled embedding with respect to every instance
/// embedding, given the upstream gradient on the final embedding.
pub fn adjust_pool_backward(
    bag_embeddings: &[Vec<f64>],
    state: &PoolState,
    upstream: &[f64],
) -> Result<Vec<Vec<f64>>> {
    if state.iterations.is_empty() {
        return Err(AmilError::State(
            "adjust_pool_backward requires forward iteration history".into(),
        ));
    }
    let k = bag_embeddings.len();
    let d = bag_embeddings[0].len();
    let t_total = state.iterations.len();
    let mut grad_f = vec![vec![0.0; d]; k];
    // dL/db^{t+1}; empty (zero) above the last iteration.
    let mut grad_b_next = vec![0.0; k];
    for t in (0..t_total).rev() {
        let it = &state.iterations[t];
        // Gradient on s^t: the upstream at the last iteration, otherwise the
        // contribution through b^{t+1}_i = b^t_i + f_i . s^t.
        let g_s: Vec<f64> = if t == t_total - 1 {
            upstream.to_vec()
        } else {
            let mut g = vec![0.0; d];
            for (gb, inst) in grad_b_next.iter().zip(bag_embeddings.iter()) {
                for (gv, x) in g.iter_mut().zip(inst.iter()) {
                    *gv += gb * x;
                }
            }
            for (gf, gb) in grad_f.iter_mut().zip(grad_b_next.iter()) {
                for (gv, sv) in gf.iter_mut().zip(it.s.iter()) {
                    *gv += gb * sv;
                }
            }
            g
        };
        // Through squash and the weighted sum.
        let g_sigma = squash_vjp(&it.sigma, &g_s);
        let mut grad_w = vec![0.0; k];
        for i in 0..k {
            grad_w[i] = dot(&bag_embeddings[i], &g_sigma);
            let wi = it.w[i];
            for (gv, gs) in grad_f[i].iter_mut().zip(g_sigma.iter()) {
                *gv += wi * gs;
            }
        }
        // Through w = softmax(b^t), plus the pass-through b^{t+1} = b^t + ...
        let g_b = softmax_vjp(&it.w, &grad_w);
        for (gbn, gb) in grad_b_next.iter_mut().zip(g_b.iter()) {
            *gbn += gb;
        }
        // At t = 0, b^1 is the zero constant; grad_b_next is discarded.
    }
    Ok(grad_f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{finite_diff_check, DEFAULT_FD_STEP};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_bag(rng: &mut ChaCha8Rng, k: usize, d: usize) -> Vec<Vec<f64>> {
        (0..k)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn squash_zero_vector() {
        assert_eq!(squash(&[0.0, 0.0, 0.0]), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn squash_unit_vector_halves() {
        let u = [1.0, 0.0];
        let s = squash(&u);
        assert!((s[0] - 0.5).abs() < 1e-15);
        assert!(s[1].abs() < 1e-15);
    }

    #[test]
    fn squash_norm_formula() {
        // |sigma| = 10 -> |s| = 100/101
        let sigma = [6.0, 8.0];
        let s = squash(&sigma);
        let n = l2_norm(&s);
        assert!((n - 100.0 / 101.0).abs() < 1e-12);
        // direction preserved
        assert!((s[0] / n - 0.6).abs() < 1e-12);
        assert!((s[1] / n - 0.8).abs() < 1e-12);
    }

    #[test]
    fn squash_norm_bounded_and_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut prev = 0.0;
        for i in 1..100 {
            let scale = i as f64 * 0.1;
            let v = [scale, 0.0, 0.0];
            let n = l2_norm(&squash(&v));
            assert!(n < 1.0);
            assert!(n > prev);
            prev = n;
        }
        for _ in 0..1000 {
            let d = rng.gen_range(1..16);
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-50.0..50.0)).collect();
            assert!(l2_norm(&squash(&v)) < 1.0);
        }
    }

    #[test]
    fn adjust_pool_singleton() {
        let f = vec![vec![0.3, -0.7, 0.2]];
        let (s, state) = adjust_pool(&f, 4).unwrap();
        assert_eq!(s, squash(&f[0]));
        for it in &state.iterations {
            assert_eq!(it.w, vec![1.0]);
        }
    }

    #[test]
    fn adjust_pool_identical_instances() {
        let x = vec![0.5, -0.25, 0.1];
        let bag = vec![x.clone(); 5];
        let (s, state) = adjust_pool(&bag, 3).unwrap();
        let expect = squash(&x);
        for (a, b) in s.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
        for it in &state.iterations {
            for wi in &it.w {
                assert!((wi - 0.2).abs() < 1e-14);
            }
        }
    }

    // Independent step-by-step oracle for Eqs. 2-5 on two orthogonal unit
    // instances: by swap symmetry b1 = b2 at every iteration, so weights stay
    // (0.5, 0.5) and the embedding is squash((0.5, 0.5)).
    #[test]
    fn adjust_pool_two_orthogonal_instances() {
        let bag = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let (s, state) = adjust_pool(&bag, 3).unwrap();
        let expect = squash(&[0.5, 0.5]);
        for (a, b) in s.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
        for it in &state.iterations {
            assert!((it.w[0] - 0.5).abs() < 1e-14);
            assert!((it.w[1] - 0.5).abs() < 1e-14);
        }
    }

    #[test]
    fn adjust_pool_rejects_empty_and_zero_t() {
        assert!(adjust_pool(&[], 3).is_err());
        assert!(adjust_pool(&[vec![1.0]], 0).is_err());
    }

    #[test]
    fn weights_sum_to_one_every_iteration() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let k = rng.gen_range(1..=8);
            let d = rng.gen_range(1..=16);
            let bag = random_bag(&mut rng, k, d);
            let (_, state) = adjust_pool(&bag, 3).unwrap();
            for it in &state.iterations {
                let sum: f64 = it.w.iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..100 {
            let k = rng.gen_range(2..=8);
            let d = rng.gen_range(1..=16);
            let bag = random_bag(&mut rng, k, d);
            let mut perm: Vec<usize> = (0..k).collect();
            for i in (1..k).rev() {
                let j = rng.gen_range(0..=i);
                perm.swap(i, j);
            }
            let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| bag[i].clone()).collect();
            let (s1, st1) = adjust_pool(&bag, 3).unwrap();
            let (s2, st2) = adjust_pool(&permuted, 3).unwrap();
            for (a, b) in s1.iter().zip(s2.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
            // weights follow the permutation
            let w1 = &st1.iterations.last().unwrap().w;
            let w2 = &st2.iterations.last().unwrap().w;
            for (pos, &src) in perm.iter().enumerate() {
                assert!((w2[pos] - w1[src]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn t1_equals_squashed_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..50 {
            let k = rng.gen_range(1..=8);
            let d = rng.gen_range(1..=16);
            let bag = random_bag(&mut rng, k, d);
            let (s, _) = adjust_pool(&bag, 1).unwrap();
            let mean = baseline_pool(&bag, BaselineMode::Mean).unwrap();
            assert_eq!(s, squash(&mean));
        }
    }

    #[test]
    fn baseline_pool_examples() {
        let single = vec![vec![1.5, -2.0]];
        assert_eq!(
            baseline_pool(&single, BaselineMode::Mean).unwrap(),
            vec![1.5, -2.0]
        );
        assert_eq!(
            baseline_pool(&single, BaselineMode::Max).unwrap(),
            vec![1.5, -2.0]
        );
        let two = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(
            baseline_pool(&two, BaselineMode::Mean).unwrap(),
            vec![0.5, 0.5]
        );
        let mx = vec![vec![1.0, -1.0], vec![0.0, 2.0]];
        assert_eq!(
            baseline_pool(&mx, BaselineMode::Max).unwrap(),
            vec![1.0, 2.0]
        );
        assert!(baseline_pool(&[], BaselineMode::Mean).is_err());
    }

    #[test]
    fn backward_singleton_equals_squash_vjp() {
        let f = vec![vec![0.4, -0.9, 0.3]];
        let (_, state) = adjust_pool(&f, 3).unwrap();
        let g = vec![1.0, -0.5, 0.25];
        let grads = adjust_pool_backward(&f, &state, &g).unwrap();
        // With one instance the weights are constant 1 and b never influences
        // the output, so the whole map is squash applied T-independently.
        let expect = squash_vjp(&f[0], &g);
        for (a, b) in grads[0].iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn backward_zero_upstream() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let bag = random_bag(&mut rng, 4, 5);
        let (_, state) = adjust_pool(&bag, 3).unwrap();
        let grads = adjust_pool_backward(&bag, &state, &vec![0.0; 5]).unwrap();
        for g in grads {
            assert!(g.iter().all(|x| *x == 0.0));
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for _ in 0..100 {
            let k = rng.gen_range(1..=8);
            let d = rng.gen_range(1..=16);
            let bag = random_bag(&mut rng, k, d);
            let upstream: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (_, state) = adjust_pool(&bag, 3).unwrap();
            let grads = adjust_pool_backward(&bag, &state, &upstream).unwrap();

            let flat: Vec<f64> = bag.iter().flatten().cloned().collect();
            let flat_grad: Vec<f64> = grads.iter().flatten().cloned().collect();
            let f = |p: &[f64]| {
                let rebag: Vec<Vec<f64>> =
                    p.chunks(d).map(|c| c.to_vec()).collect();
                let (s, _) = adjust_pool(&rebag, 3).unwrap();
                dot(&s, &upstream)
            };
            let report = finite_diff_check(f, &flat, &flat_grad, DEFAULT_FD_STEP).unwrap();
            assert!(report.max_relative_error < 1e-4, "{report:?}");
        }
    }
}
