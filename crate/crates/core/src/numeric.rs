//! Log-space kernels shared by the oracle, the decoders and the baselines.
//!
//! All probability mass in this crate lives in nats. `f64::NEG_INFINITY` is
//! exact zero mass; NaN is always a bug and is rejected at the boundary.

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NumericError {
    #[error("log_sum_exp over an empty list")]
    Empty,
    #[error("NaN at position {0}")]
    NaN(usize),
    #[error("categorical sample with no finite weight")]
    NoFiniteWeight,
}

/// log Σ exp(v_i) with max-subtraction. All `−∞` inputs yield `−∞`.
pub fn log_sum_exp(values: &[f64]) -> Result<f64, NumericError> {
    if values.is_empty() {
        return Err(NumericError::Empty);
    }
    let mut max = f64::NEG_INFINITY;
    for (i, &v) in values.iter().enumerate() {
        if v.is_nan() {
            return Err(NumericError::NaN(i));
        }
        if v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    let sum: f64 = values.iter().map(|&v| (v - max).exp()).sum();
    Ok(max + sum.ln())
}

/// Shifts log-weights so they sum to probability one.
pub fn normalize_log(values: &[f64]) -> Result<Vec<f64>, NumericError> {
    let z = log_sum_exp(values)?;
    if z == f64::NEG_INFINITY {
        return Err(NumericError::NoFiniteWeight);
    }
    Ok(values.iter().map(|v| v - z).collect())
}

/// Draws an index with probability `exp(w_i − log_sum_exp(w))`, consuming
/// exactly one uniform variate. Errors when no weight is finite.
pub fn sample_categorical<R: Rng>(log_weights: &[f64], rng: &mut R) -> Result<usize, NumericError> {
    let norm = normalize_log(log_weights)?;
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_finite = None;
    for (i, &w) in norm.iter().enumerate() {
        if w == f64::NEG_INFINITY {
            continue;
        }
        acc += w.exp();
        last_finite = Some(i);
        if u < acc {
            return Ok(i);
        }
    }
    // Rounding can leave acc a hair under 1; the draw belongs to the tail.
    last_finite.ok_or(NumericError::NoFiniteWeight)
}

/// Shannon entropy (nats) of a normalized log-space distribution.
pub fn entropy_nats(log_probs: &[f64]) -> f64 {
    log_probs
        .iter()
        .filter(|&&lp| lp > f64::NEG_INFINITY)
        .map(|&lp| -lp.exp() * lp)
        .sum()
}
