//! Central finite differences, the independent oracle for every backward rule.

use super::Array2;

/// Denominator floor for [`max_relative_error`]; below it the comparison is
/// effectively absolute.
pub const GRADCHECK_FLOOR: f64 = 1e-3;

/// `(f(p + h·e_k) − f(p − h·e_k)) / 2h` for every coordinate `k` of every
/// parameter. `f` only ever sees perturbed copies of `params`.
pub fn finite_difference_grad<F>(mut f: F, params: &[Array2], h: f64) -> Vec<Array2>
where
    F: FnMut(&[Array2]) -> f64,
{
    assert!(h > 0.0, "finite difference step must be positive");
    let mut work: Vec<Array2> = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = Array2::zeros(params[p].rows(), params[p].cols());
        for k in 0..params[p].len() {
            let orig = work[p].data()[k];
            work[p].data_mut()[k] = orig + h;
            let plus = f(&work);
            work[p].data_mut()[k] = orig - h;
            let minus = f(&work);
            work[p].data_mut()[k] = orig;
            g.data_mut()[k] = (plus - minus) / (2.0 * h);
        }
        grads.push(g);
    }
    grads
}

/// `max_k |a_k − b_k| / max(|a_k|, |b_k|, GRADCHECK_FLOOR)` over all entries.
pub fn max_relative_error(analytic: &[Array2], numeric: &[Array2]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        assert_eq!(a.shape(), n.shape());
        for (&x, &y) in a.data().iter().zip(n.data()) {
            let denom = x.abs().max(y.abs()).max(GRADCHECK_FLOOR);
            let err = (x - y).abs() / denom;
            worst = if err.is_nan() {
                f64::INFINITY
            } else {
                worst.max(err)
            };
        }
    }
    worst
}
