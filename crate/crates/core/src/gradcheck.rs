//! Central finite-difference gradient checking.
//!
//! The error metric is normwise: the largest coordinate discrepancy divided by
//! the largest gradient magnitude (analytic or numeric), floored so that an
//! all-zero gradient compares against an absolute scale instead of dividing
//! by zero.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound on the error denominator.
    pub floor: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            step: 1e-4,
            tolerance: 1e-5,
            floor: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Coordinate with the largest absolute discrepancy.
    pub worst_index: usize,
    pub numeric: Vec<f64>,
    pub passed: bool,
}

/// Central-difference gradient of `loss` at `point`.
pub fn numeric_gradient<F>(mut loss: F, point: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(step > 0.0) {
        return Err(Error::Config(format!("gradcheck step must be > 0, got {step}")));
    }
    let mut probe = point.to_vec();
    let mut grad = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        probe[i] = point[i] + step;
        let plus = loss(&probe);
        probe[i] = point[i] - step;
        let minus = loss(&probe);
        probe[i] = point[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss is not finite when perturbing coordinate {i} ({plus}, {minus})"
            )));
        }
        grad.push((plus - minus) / (2.0 * step));
    }
    Ok(grad)
}

/// Compares `analytic` against central differences of `loss` around `params`.
pub fn finite_diff_gradcheck<F>(
    loss: F,
    params: &[f64],
    analytic: &[f64],
    config: &GradcheckConfig,
) -> Result<GradcheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if params.len() != analytic.len() {
        return Err(Error::Contract(format!(
            "{} parameters but {} analytic gradient entries",
            params.len(),
            analytic.len()
        )));
    }
    let numeric = numeric_gradient(loss, params, config.step)?;
    Ok(compare(analytic, numeric, config))
}

pub(crate) fn compare(analytic: &[f64], numeric: Vec<f64>, config: &GradcheckConfig) -> GradcheckReport {
    let mut scale = config.floor;
    let mut max_abs_error = 0.0;
    let mut worst_index = 0;
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        scale = scale.max(a.abs()).max(n.abs());
        let err = (a - n).abs();
        if err > max_abs_error || err.is_nan() {
            max_abs_error = err;
            worst_index = i;
        }
    }
    let max_rel_error = max_abs_error / scale;
    GradcheckReport {
        max_rel_error,
        max_abs_error,
        worst_index,
        numeric,
        passed: max_rel_error < config.tolerance,
    }
}
