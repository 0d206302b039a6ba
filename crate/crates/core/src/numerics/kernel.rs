use crate::error::{Error, Result};

/// Gaussian kernel `exp(-|a - b|^2 / bandwidth)`.
pub fn rbf_kernel(a: &[f64], b: &[f64], bandwidth: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "kernel inputs have {} and {} dims",
            a.len(),
            b.len()
        )));
    }
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return Err(Error::invalid(format!("bandwidth must be positive, got {bandwidth}")));
    }
    Ok(rbf_from_sq_dist(super::linalg::sq_dist(a, b), bandwidth))
}

#[inline]
pub(crate) fn rbf_from_sq_dist(sq: f64, bandwidth: f64) -> f64 {
    (-sq / bandwidth).exp()
}
