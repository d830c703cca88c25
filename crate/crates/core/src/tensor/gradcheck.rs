//! Central-finite-difference gradient checking against the analytic
//! backward pass. Always runs at 64-bit precision.

/// Central finite differences of `f` at `x` with step `h`, one coordinate
/// at a time.
pub fn finite_diff_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Relative error between two gradient vectors:
/// `max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)`.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = 0.0f64;
    for (&a, &b) in analytic.iter().zip(numeric) {
        let denom = a.abs().max(b.abs()).max(floor);
        let err = (a - b).abs() / denom;
        if err > worst {
            worst = err;
        }
    }
    worst
}

/// Step size used by the gradient suites.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for relative errors; gradients below this magnitude
/// are compared absolutely against `tolerance * floor`.
pub const FD_FLOOR: f64 = 1e-2;
