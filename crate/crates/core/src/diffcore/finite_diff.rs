use super::{GraphError, Tensor};

/// Central-difference gradient of a scalar function.
///
/// Each coordinate is probed at `x ± eps`; the result has the shape of `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, eps: f64) -> Result<Tensor, GraphError>
where
    F: FnMut(&Tensor) -> Result<f64, GraphError>,
{
    assert!(eps > 0.0, "eps must be positive");
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(GraphError::NonFiniteProbe(i));
        }
        out.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    Ok(out)
}

/// `‖a − b‖∞ / max(‖a‖∞, ‖b‖∞, floor)`.
///
/// The floor keeps gradients that are zero up to rounding from producing
/// spurious huge ratios.
pub fn relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    diff / a.max_abs().max(b.max_abs()).max(floor)
}
