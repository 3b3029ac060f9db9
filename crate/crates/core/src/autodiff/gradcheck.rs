//! Central finite differences, the oracle for every backward rule.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Denominator floor for [`relative_error`]; differences between gradients
/// smaller than this in magnitude are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// `(f(p + h·e_i) - f(p - h·e_i)) / 2h` for every element `i` of `params`.
pub fn finite_diff_grad<F>(mut f: F, params: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite difference step must be positive, got {h}")));
    }
    let mut probe = params.detach();
    let mut grad = vec![0.0; params.numel()];
    for (i, slot) in grad.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "objective is not finite at perturbed element {i}: {plus}, {minus}"
            )));
        }
        *slot = (plus - minus) / (2.0 * h);
    }
    Tensor::new(params.shape().to_vec(), grad)
}

/// `|a - b| / max(|a|, |b|, REL_ERROR_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

/// Largest [`relative_error`] over paired entries.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &b)| relative_error(a, b))
        .fold(0.0, f64::max)
}
