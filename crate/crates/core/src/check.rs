//! Central finite-difference utilities for gradient verification.
//!
//! The verification commands and the test suites both compare analytic
//! gradients against (f(x+h) - f(x-h)) / 2h, elementwise over parameter
//! vectors.

/// Default probe step for central differences.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Relative error that tolerates tiny magnitudes: |a - b| / max(|a|, |b|, 1).
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Central finite difference of a scalar loss with respect to one slot of a
/// flat parameter vector owned by the closure.
pub fn central_diff(mut eval: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (eval(x + h) - eval(x - h)) / (2.0 * h)
}

/// Compares an analytic gradient against central differences over every
/// element of a parameter vector. `loss_at` must evaluate the loss with the
/// given vector substituted for the parameter. Returns the max relative
/// error observed.
pub fn max_grad_rel_err(
    params: &[f64],
    analytic: &[f64],
    h: f64,
    mut loss_at: impl FnMut(&[f64]) -> f64,
) -> f64 {
    assert_eq!(params.len(), analytic.len(), "gradient length mismatch");
    let mut worst: f64 = 0.0;
    let mut probe = params.to_vec();
    for i in 0..params.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = loss_at(&probe);
        probe[i] = orig - h;
        let minus = loss_at(&probe);
        probe[i] = orig;
        let fd = (plus - minus) / (2.0 * h);
        worst = worst.max(rel_err(analytic[i], fd));
    }
    worst
}
