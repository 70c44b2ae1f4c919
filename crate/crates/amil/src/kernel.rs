//! Minimal dense numeric kernel.
//!
//! Row-major `f64` matrices, the handful of elementwise ops the networks
//! need, and a central finite-difference gradient checker that every other
//! module's backward pass is audited against.

use crate::error::{AmilError, Result};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Build from row-major values. Panics if the length does not match.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "row-major length mismatch");
        DenseMatrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `y = W x` for a column vector `x` of length `cols`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "matvec dimension mismatch");
        let mut y = vec![0.0; self.rows];
        for r in 0..self.rows {
            let row = self.row(r);
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(x.iter()) {
                acc += a * b;
            }
            y[r] = acc;
        }
        y
    }

    /// `y = W^T x` for a column vector `x` of length `rows`.
    pub fn matvec_transposed(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.rows, "matvec_transposed dimension mismatch");
        let mut y = vec![0.0; self.cols];
        for r in 0..self.rows {
            let xr = x[r];
            let row = self.row(r);
            for (c, a) in row.iter().enumerate() {
                y[c] += a * xr;
            }
        }
        y
    }
}

/// Standard matrix product.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.rows {
        return Err(AmilError::Shape {
            context: "matmul requires a.cols == b.rows",
            left_rows: a.rows,
            left_cols: a.cols,
            right_rows: b.rows,
            right_cols: b.cols,
        });
    }
    let mut out = DenseMatrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for k in 0..a.cols {
            let aik = a.get(i, k);
            if aik == 0.0 {
                continue;
            }
            let brow = b.row(k);
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += aik * bv;
            }
        }
    }
    Ok(out)
}

/// Numerically stable softmax; shift-invariant, outputs sum to 1.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(AmilError::Domain("softmax of empty vector".into()));
    }
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Vector-Jacobian product of softmax given its output `w` and upstream `g`.
pub fn softmax_vjp(w: &[f64], g: &[f64]) -> Vec<f64> {
    let wg: f64 = w.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
    w.iter().zip(g.iter()).map(|(wi, gi)| wi * (gi - wg)).collect()
}

pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Result of a finite-difference gradient audit.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub param_count: usize,
    pub worst_index: usize,
}

/// Default central-difference step.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

const REL_ERR_EPS: f64 = 1e-8;

/// Compare an analytic gradient against central finite differences of `f`.
///
/// Relative error per coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<F>(
    mut f: F,
    params: &[f64],
    analytic_grad: &[f64],
    step: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic_grad.len(), "gradient length mismatch");
    if step <= 0.0 {
        return Err(AmilError::Domain("finite-difference step must be > 0".into()));
    }
    let mut work = params.to_vec();
    let mut worst = 0.0_f64;
    let mut worst_index = 0;
    for i in 0..params.len() {
        work[i] = params[i] + step;
        let f_plus = f(&work);
        work[i] = params[i] - step;
        let f_minus = f(&work);
        work[i] = params[i];
        if !f_plus.is_finite() || !f_minus.is_finite() {
            return Err(AmilError::Numeric {
                context: "finite_diff_check objective",
                index: i,
            });
        }
        let numeric = (f_plus - f_minus) / (2.0 * step);
        let analytic = analytic_grad[i];
        let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_EPS);
        let rel = (analytic - numeric).abs() / denom;
        if rel > worst {
            worst = rel;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        max_relative_error: worst,
        param_count: params.len(),
        worst_index,
    })
}
