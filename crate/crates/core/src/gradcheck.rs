//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-4,
            tolerance: 1e-5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst tensor-wise relative error, see [`tensor_relative_error`].
    pub max_relative_error: f64,
    /// Tensor-wise relative error of each tensor, in parameter order.
    pub per_tensor: Vec<f64>,
    /// `(tensor, element)` with the largest absolute discrepancy inside the
    /// worst tensor.
    pub worst: (usize, usize),
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    /// Worst coordinate-wise [`relative_error`]; diagnostic only, since it is
    /// dominated by finite-difference roundoff wherever a gradient is ~0.
    pub max_elementwise_error: f64,
    pub passed: bool,
}

/// Coordinate-wise relative error `|a − n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Tensor-wise relative error `max|a − n| / max(1e-8, max|a| + max|n|)`.
pub fn tensor_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale_a = analytic.iter().map(|a| a.abs()).fold(0.0, f64::max);
    let scale_n = numeric.iter().map(|n| n.abs()).fold(0.0, f64::max);
    diff / (scale_a + scale_n).max(1e-8)
}

/// Central differences `(f(θ+δ) − f(θ−δ)) / 2δ` for every coordinate.
pub fn numeric_gradient<F>(f: F, params: &[Tensor], step: f64) -> Vec<Tensor>
where
    F: Fn(&[Tensor]) -> f64,
{
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for t in 0..params.len() {
        let mut g = Tensor::zeros(params[t].shape());
        for i in 0..params[t].len() {
            let original = params[t].data()[i];
            work[t].data_mut()[i] = original + step;
            let plus = f(&work);
            work[t].data_mut()[i] = original - step;
            let minus = f(&work);
            work[t].data_mut()[i] = original;
            g.data_mut()[i] = (plus - minus) / (2.0 * step);
        }
        out.push(g);
    }
    out
}

/// Compares `grad(θ)` against central differences tensor by tensor.
///
/// `f` must be deterministic; two differing evaluations at the baseline are
/// reported as a contract error.
pub fn grad_check<F, G>(f: F, grad: G, params: &[Tensor], config: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> f64,
    G: Fn(&[Tensor]) -> Vec<Tensor>,
{
    if !(config.step > 0.0) {
        return Err(Error::Domain(format!("step must be positive, got {}", config.step)));
    }
    let base = f(params);
    let again = f(params);
    if base.to_bits() != again.to_bits() {
        return Err(Error::Contract(format!(
            "function is not deterministic: {base} then {again}"
        )));
    }
    let analytic = grad(params);
    if analytic.len() != params.len() {
        return Err(Error::Contract(format!(
            "gradient has {} tensors for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    for (g, p) in analytic.iter().zip(params) {
        if g.shape() != p.shape() {
            return Err(Error::Shape {
                op: "grad_check",
                left: g.shape().to_vec(),
                right: p.shape().to_vec(),
            });
        }
    }
    let numeric = numeric_gradient(&f, params, config.step);

    let per_tensor: Vec<f64> = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| tensor_relative_error(a.data(), n.data()))
        .collect();
    let (worst_tensor, max_relative_error) = per_tensor
        .iter()
        .copied()
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    let (a, n) = (analytic[worst_tensor].data(), numeric[worst_tensor].data());
    let worst_elem = (0..a.len())
        .max_by(|&i, &j| (a[i] - n[i]).abs().total_cmp(&(a[j] - n[j]).abs()))
        .unwrap_or(0);
    let max_elementwise_error = analytic
        .iter()
        .zip(&numeric)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()).map(|(&x, &y)| relative_error(x, y)))
        .fold(0.0, f64::max);

    Ok(GradCheckReport {
        max_relative_error,
        per_tensor,
        worst: (worst_tensor, worst_elem),
        analytic_at_worst: a.get(worst_elem).copied().unwrap_or(0.0),
        numeric_at_worst: n.get(worst_elem).copied().unwrap_or(0.0),
        max_elementwise_error,
        passed: max_relative_error < config.tolerance,
    })
}
