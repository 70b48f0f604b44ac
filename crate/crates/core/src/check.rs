//! Verification utilities: central finite differences and gradient
//! comparison. Used by the test suites as an implementation-independent
//! oracle; no simulator code path depends on this module.

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn finite_diff<F>(x: &[f64], h: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let x0 = probe[i];
        probe[i] = x0 + h;
        let fp = f(&probe);
        probe[i] = x0 - h;
        let fm = f(&probe);
        probe[i] = x0;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Relative error with an absolute floor, so that near-zero gradients are
/// compared absolutely instead of amplifying finite-difference noise.
pub fn grad_rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / scale
}

/// Largest elementwise `grad_rel_err` between two gradient vectors.
pub fn max_grad_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| grad_rel_err(a, n))
        .fold(0.0, f64::max)
}

/// Absolute elementwise max difference.
pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
