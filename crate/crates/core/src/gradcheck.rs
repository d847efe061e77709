//! Central finite differences, used as the oracle for every adjoint.

use crate::tensor::Tensor;

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every element `i`.
pub fn finite_diff_grad<F>(f: F, x: &Tensor<f64>, step: f64) -> Tensor<f64>
where
    F: Fn(&Tensor<f64>) -> f64,
{
    assert!(step > 0.0, "finite difference step must be positive");
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe);
        probe.data_mut()[i] = orig - step;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (2.0 * step));
    }
    Tensor::from_raw(x.shape().to_vec(), grad)
}

/// Magnitude below which gradient entries are compared on an absolute
/// scale. Central differences at step 1e-5 on O(1) objectives carry
/// roughly 1e-11·|f| of rounding noise, so entries smaller than this floor
/// cannot be resolved relatively.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

/// Largest elementwise `|a − b| / max(|a|, |b|, REL_ERROR_FLOOR)`.
pub fn max_rel_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes differ");
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &b)| (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR))
        .fold(0.0, f64::max)
}
