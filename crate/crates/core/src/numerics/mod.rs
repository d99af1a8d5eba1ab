//! Dense kernels, stable reductions, the Adam optimizer, dropout masks and
//! seeded random streams.

mod adam;
mod matrix;
mod rng;

pub use adam::{adam_step, AdamConfig, AdamState, WeightDecay};
pub use matrix::DenseMatrix;
pub use rng::{dropout_mask, dropout_mask_seeded, RngStreams, StreamPurpose};

use crate::error::{Error, Result};

/// Numerically stable `ln Σ exp(v_i)`.
pub fn log_sum_exp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::Degenerate("log_sum_exp of an empty vector".into()));
    }
    Ok(log_sum_exp_unchecked(v))
}

/// `log_sum_exp` for callers that guarantee a non-empty slice.
#[inline]
pub(crate) fn log_sum_exp_unchecked(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || !max.is_finite() {
        return max;
    }
    let sum: f64 = v.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Softmax of one row, written into `out`.
#[inline]
pub fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: &DenseMatrix) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(m.rows(), m.cols());
    for i in 0..m.rows() {
        softmax_into(m.row(i), out.row_mut(i));
    }
    out
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(m: &DenseMatrix) -> DenseMatrix {
    let mut out = m.clone();
    for i in 0..m.rows() {
        let lse = log_sum_exp_unchecked(m.row(i));
        for x in out.row_mut(i) {
            *x -= lse;
        }
    }
    out
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}
