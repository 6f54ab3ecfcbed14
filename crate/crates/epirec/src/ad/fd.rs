//! Central finite differences, the independent oracle every analytic
//! gradient in this crate is checked against.

/// Central-difference gradient of `f` at `x0`.
pub fn finite_diff_grad(mut f: impl FnMut(&[f64]) -> f64, x0: &[f64], eps: f64) -> Vec<f64> {
    let mut g = Vec::with_capacity(x0.len());
    let mut x = x0.to_vec();
    for i in 0..x0.len() {
        let h = eps * (1.0 + x0[i].abs());
        x[i] = x0[i] + h;
        let fp = f(&x);
        x[i] = x0[i] - h;
        let fm = f(&x);
        x[i] = x0[i];
        g.push((fp - fm) / (2.0 * h));
    }
    g
}

/// Max relative disagreement between two gradient vectors, scaled by the
/// larger norm.
pub fn grad_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()))
        / scale
}
