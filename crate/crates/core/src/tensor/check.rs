//! Central-difference gradient verification harness.

use super::{Result, Tensor, TensorError};

/// Compares an analytic gradient against central finite differences.
///
/// For each coordinate, the input is perturbed by +/- eps and the numeric
/// slope is computed in f64 against the *realized* spacing of the two
/// perturbed f32 inputs, so quadratics come out exact up to rounding.
/// Returns the maximum over coordinates of
/// `|slope - grad| / (|grad| + 1e-8)`.
///
/// `f` evaluates the scalar objective; it may route through a fresh
/// graph (f32) or exact math (f64) as the test requires.
pub fn finite_diff_check<F>(mut f: F, x: &Tensor, eps: f32, grad: &[f32]) -> Result<f32>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if eps <= 0.0 {
        return Err(TensorError::Invalid { op: "finite_diff_check", msg: "eps must be > 0".into() });
    }
    if grad.len() != x.numel() {
        return Err(TensorError::ShapeMismatch {
            op: "finite_diff_check",
            detail: format!("{} grad entries vs {} coordinates", grad.len(), x.numel()),
        });
    }
    let mut max_err = 0.0f32;
    let mut probe = x.clone();
    probe.requires_grad = false;
    for i in 0..x.numel() {
        let orig = x.data()[i];
        let hi = orig + eps;
        let lo = orig - eps;

        probe.data_mut()[i] = hi;
        let f_hi = f(&probe)?;
        probe.data_mut()[i] = lo;
        let f_lo = f(&probe)?;
        probe.data_mut()[i] = orig;

        if !f_hi.is_finite() || !f_lo.is_finite() {
            return Err(TensorError::NonFinite { op: "finite_diff_check objective".into() });
        }
        let spacing = hi as f64 - lo as f64;
        let slope = (f_hi - f_lo) / spacing;
        let err = ((slope - grad[i] as f64).abs() / (grad[i].abs() as f64 + 1e-8)) as f32;
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}
