//! Small numeric primitives shared by the losses and encoders.
//!
//! Everything here works on plain `f64` slices or [`DenseVector`]; the
//! reverse-mode machinery lives in [`tape`].

pub mod tape;

use std::collections::BTreeMap;

use crate::error::{CoreError, Result};

/// Dense vector with finite entries. Construction rejects NaN and infinities
/// so downstream code never has to re-check.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseVector {
    values: Vec<f64>,
}

impl DenseVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite(format!("DenseVector entry {i}")));
        }
        Ok(Self { values })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            values: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &DenseVector) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(CoreError::DimMismatch {
                context: "dot",
                expected: self.dim(),
                got: other.dim(),
            });
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum())
    }
}

impl From<Vec<f64>> for DenseVector {
    /// Infallible path for values produced internally (already finite).
    fn from(values: Vec<f64>) -> Self {
        Self { values }
    }
}

/// Scalar loss value plus gradients keyed by parameter name.
///
/// `warning` carries soft diagnostics (log-floor clamps, degenerate cohorts)
/// that don't invalidate the value itself.
#[derive(Debug, Clone)]
pub struct GradientRecord {
    pub value: f64,
    pub grads: BTreeMap<String, DenseVector>,
    pub warning: Option<String>,
}

impl GradientRecord {
    pub fn new(value: f64) -> Self {
        Self {
            value,
            grads: BTreeMap::new(),
            warning: None,
        }
    }

    pub fn grad(&self, key: &str) -> Option<&DenseVector> {
        self.grads.get(key)
    }
}

/// x / ||x||_2. Zero-norm input is an error, not a silent NaN.
pub fn l2_normalize(x: &DenseVector) -> Result<DenseVector> {
    let n = x.norm();
    if n <= 0.0 || !n.is_finite() {
        return Err(CoreError::ZeroNorm {
            context: "l2_normalize",
        });
    }
    Ok(DenseVector::from(
        x.values().iter().map(|v| v / n).collect::<Vec<_>>(),
    ))
}

/// Cosine similarity <a, b> / (||a|| ||b||). Errors on zero norms.
pub fn cosine_similarity(a: &DenseVector, b: &DenseVector) -> Result<f64> {
    let na = a.norm();
    let nb = b.norm();
    if na <= 0.0 || nb <= 0.0 {
        return Err(CoreError::ZeroNorm {
            context: "cosine_similarity",
        });
    }
    Ok(a.dot(b)? / (na * nb))
}

/// softmax(logits / tau) with max-subtraction for stability.
pub fn softmax_temperature(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(CoreError::NonPositiveTemperature(tau));
    }
    if logits.is_empty() {
        return Err(CoreError::EmptyInput("softmax_temperature"));
    }
    if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
        return Err(CoreError::NonFinite(format!(
            "softmax_temperature logit {i}"
        )));
    }
    let scaled: Vec<f64> = logits.iter().map(|v| v / tau).collect();
    let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// log(sum(exp(x))) with max-subtraction.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + xs.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Central-difference gradient check.
///
/// Returns the maximum relative error
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)` over all
/// coordinates, probing `f` at `point +- eps * e_i`.
pub fn finite_difference_check<F>(
    f: F,
    point: &[f64],
    analytic: &[f64],
    eps: f64,
) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    if point.len() != analytic.len() {
        return Err(CoreError::DimMismatch {
            context: "finite_difference_check",
            expected: point.len(),
            got: analytic.len(),
        });
    }
    if !(eps > 0.0) {
        return Err(CoreError::InvalidConfig(format!(
            "finite difference step must be positive, got {eps}"
        )));
    }
    let mut worst = 0.0f64;
    let mut probe = point.to_vec();
    for i in 0..point.len() {
        probe[i] = point[i] + eps;
        let up = f(&probe);
        probe[i] = point[i] - eps;
        let down = f(&probe);
        probe[i] = point[i];
        let numeric = (up - down) / (2.0 * eps);
        if !numeric.is_finite() {
            return Err(CoreError::NonFinite(format!(
                "finite difference at coordinate {i}"
            )));
        }
        let denom = 1.0f64.max(analytic[i].abs()).max(numeric.abs());
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}

/// Default probe step for gradient checks.
pub const FD_EPS: f64 = 1e-5;

/// Stack equal-length vectors into an n x d matrix.
pub fn stack_rows(rows: &[DenseVector]) -> Result<ndarray::Array2<f64>> {
    if rows.is_empty() {
        return Err(CoreError::EmptyInput("stack_rows"));
    }
    let d = rows[0].dim();
    for r in rows {
        if r.dim() != d {
            return Err(CoreError::DimMismatch {
                context: "stack_rows",
                expected: d,
                got: r.dim(),
            });
        }
    }
    let mut m = ndarray::Array2::zeros((rows.len(), d));
    for (i, r) in rows.iter().enumerate() {
        for (j, v) in r.values().iter().enumerate() {
            m[[i, j]] = *v;
        }
    }
    Ok(m)
}

/// Extract row `i` as a [`DenseVector`].
pub fn row_vector(m: &ndarray::Array2<f64>, i: usize) -> DenseVector {
    DenseVector::from(m.row(i).to_vec())
}
