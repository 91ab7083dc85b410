use crate::error::{CcraError, Result};

use super::Tensor;

/// Central-difference gradient of a scalar function, one coordinate at a time.
pub fn finite_difference<F>(mut f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(CcraError::InvalidArgument(format!(
            "finite difference step must be positive, got {eps}"
        )));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(CcraError::NonFiniteEvaluation(i));
        }
        grad.push((plus - minus) / (2.0 * eps));
    }
    Tensor::new(x.shape(), grad)
}
