//! Central finite-difference gradient checking.

/// Denominator floor of the relative error.
const REL_FLOOR: f64 = 1e-8;

/// Numerical gradient of `f` at `point`. Coordinate `i` is perturbed by
/// `h_i = step * max(|x_i|, 1)`.
pub fn central_differences(f: impl Fn(&[f64]) -> f64, point: &[f64], step: f64) -> Vec<f64> {
    let mut x = point.to_vec();
    (0..point.len())
        .map(|i| {
            let h = step * point[i].abs().max(1.0);
            x[i] = point[i] + h;
            let up = f(&x);
            x[i] = point[i] - h;
            let down = f(&x);
            x[i] = point[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `max_i |a_i - n_i| / max(|a_i|, |n_i|, 1e-8)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR))
        .fold(0.0, f64::max)
}

/// Compares the analytic gradient returned by `f` at `point` with central
/// differences of its value; returns the max relative error. `f` must be
/// deterministic (noise fixed).
pub fn gradcheck(f: impl Fn(&[f64]) -> (f64, Vec<f64>), point: &[f64], step: f64) -> f64 {
    let (_, analytic) = f(point);
    let numeric = central_differences(|x| f(x).0, point, step);
    max_relative_error(&analytic, &numeric)
}
