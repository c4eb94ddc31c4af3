//! Tolerance helpers shared by the diagnostics module and the test suites.

use crate::tensor::Tensor;

/// Max-norm relative error between two same-shape tensors:
/// `max_i |a_i - b_i| / max(max_i |a_i|, max_i |b_i|)`, with 0 for two zero
/// tensors. Appropriate when both sides compute the same mathematical value
/// through different code paths, so the discrepancy is pure rounding.
pub fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    debug_assert_eq!(a.shape(), b.shape());
    let num = a
        .data()
        .iter()
        .zip(b.data())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let den = a.max_abs().max(b.max_abs());
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Max-norm error with the denominator floored at 1:
/// `max_i |a_i - b_i| / max(1, max_i |a_i|, max_i |b_i|)`.
///
/// Used against finite-difference oracles, whose absolute noise floor
/// (~1e-10 for h = 1e-6) would otherwise dominate the ratio whenever the
/// true gradient is tiny.
pub fn rel_err_fd(a: &Tensor, b: &Tensor) -> f64 {
    debug_assert_eq!(a.shape(), b.shape());
    let num = a
        .data()
        .iter()
        .zip(b.data())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    num / a.max_abs().max(b.max_abs()).max(1.0)
}

/// Scalar variant of [`rel_err_fd`].
pub fn rel_err_fd_scalar(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}
