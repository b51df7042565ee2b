use super::{Matrix, Real, RngStream};
use crate::error::{dim_mismatch, Result};

/// Draws `mean + factor * z` with `z ~ N(0, I)`; `factor * factor^T` is the covariance.
pub fn sample_gaussian<T: Real>(rng: &mut RngStream, mean: &[T], factor: &Matrix<T>) -> Result<Vec<T>> {
    let mut out = vec![T::zero(); mean.len()];
    sample_gaussian_into(rng, mean, factor, &mut out)?;
    Ok(out)
}

pub fn sample_gaussian_into<T: Real>(
    rng: &mut RngStream,
    mean: &[T],
    factor: &Matrix<T>,
    out: &mut [T],
) -> Result<()> {
    let d = mean.len();
    if factor.rows() != d || out.len() != d {
        return Err(dim_mismatch(format!(
            "gaussian of dim {d} with {}x{} factor",
            factor.rows(),
            factor.cols()
        )));
    }
    let z: Vec<T> = rng.normal_vec(factor.cols());
    for (i, o) in out.iter_mut().enumerate() {
        *o = mean[i] + super::dot(factor.row(i), &z);
    }
    Ok(())
}
