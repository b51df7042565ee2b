use crate::dynamics::{ObsOperator, SystemSpec};
use crate::error::{dim_mismatch, Error, Result};
use crate::numerics::{all_finite, lit, sample_gaussian_into, Matrix, Real, RngStream};

/// `N x d_v` matrix whose rows are ensemble members.
pub type StateEnsemble<T = f64> = Matrix<T>;

pub fn ensemble_mean<T: Real>(ens: &Matrix<T>) -> Vec<T> {
    let n = ens.rows();
    let mut m = vec![T::zero(); ens.cols()];
    for i in 0..n {
        for (a, &x) in m.iter_mut().zip(ens.row(i)) {
            *a += x;
        }
    }
    let inv = T::one() / T::from_usize(n.max(1)).unwrap();
    m.iter_mut().for_each(|a| *a *= inv);
    m
}

/// Members minus the ensemble mean.
pub fn anomalies<T: Real>(ens: &Matrix<T>) -> Matrix<T> {
    let m = ensemble_mean(ens);
    let mut out = ens.clone();
    for i in 0..ens.rows() {
        for (x, &mu) in out.row_mut(i).iter_mut().zip(&m) {
            *x -= mu;
        }
    }
    out
}

/// Empirical covariance `X^T Y / N` of two row-aligned ensembles.
pub fn cross_covariance<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.rows() != b.rows() {
        return Err(dim_mismatch("cross covariance of ensembles with different sizes"));
    }
    let n: T = T::from_usize(a.rows()).unwrap();
    Ok(anomalies(a).t_matmul(&anomalies(b))?.scale(T::one() / n))
}

/// Applies `h` to every member.
pub fn observe_ensemble<T: Real>(obs: &ObsOperator, ens: &Matrix<T>) -> Matrix<T> {
    Matrix::from_fn(ens.rows(), obs.obs_dim, |n, l| ens[(n, obs.index(l))])
}

/// Initial ensemble `v^(n) = v0 + factor z^(n)`.
pub fn initial_ensemble<T: Real>(v0: &[T], n: usize, factor: &Matrix<T>, rng: &mut RngStream) -> Result<Matrix<T>> {
    let mut ens = Matrix::zeros(n, v0.len());
    for i in 0..n {
        sample_gaussian_into(rng, v0, factor, ens.row_mut(i))?;
    }
    Ok(ens)
}

/// Per-member noise for one assimilation step: process noise `xi` added in
/// the forecast and observation perturbations `eta` added in the extend step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepNoise<T: Real = f64> {
    /// `N x d_v`.
    pub process: Matrix<T>,
    /// `N x d_y`.
    pub obs: Matrix<T>,
}

impl<T: Real> StepNoise<T> {
    /// Draws all process rows first, then all observation rows.
    pub fn draw(spec: &SystemSpec<T>, n: usize, rng: &mut RngStream) -> Result<Self> {
        let zv = vec![T::zero(); spec.state_dim()];
        let zy = vec![T::zero(); spec.obs_dim()];
        let mut process = Matrix::zeros(n, spec.state_dim());
        let mut obs = Matrix::zeros(n, spec.obs_dim());
        for i in 0..n {
            sample_gaussian_into(rng, &zv, spec.process_factor(), process.row_mut(i))?;
        }
        for i in 0..n {
            sample_gaussian_into(rng, &zy, spec.obs_factor(), obs.row_mut(i))?;
        }
        Ok(Self { process, obs })
    }

    pub fn zeros(n: usize, d_v: usize, d_y: usize) -> Self {
        Self { process: Matrix::zeros(n, d_v), obs: Matrix::zeros(n, d_y) }
    }

    pub fn members(&self) -> usize {
        self.process.rows()
    }

    /// Reorders members: row `i` of the result is row `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self { process: permute_rows(&self.process, perm), obs: permute_rows(&self.obs, perm) }
    }
}

/// Row `i` of the result is row `perm[i]` of `m`.
pub fn permute_rows<T: Real>(m: &Matrix<T>, perm: &[usize]) -> Matrix<T> {
    Matrix::from_fn(perm.len(), m.cols(), |i, j| m[(perm[i], j)])
}

/// Forecast `Psi(v^(n)) + xi^(n)` for every member.
pub fn predict<T: Real>(spec: &SystemSpec<T>, ens: &Matrix<T>, process_noise: &Matrix<T>) -> Result<Matrix<T>> {
    if process_noise.rows() != ens.rows() || process_noise.cols() != ens.cols() {
        return Err(dim_mismatch("process noise does not match the ensemble"));
    }
    let mut out = Matrix::zeros(ens.rows(), ens.cols());
    for i in 0..ens.rows() {
        let next = spec.step(ens.row(i))?;
        for ((o, x), e) in out.row_mut(i).iter_mut().zip(next).zip(process_noise.row(i)) {
            *o = x + *e;
        }
    }
    Ok(out)
}

/// Multiplicative inflation: mean kept, anomalies scaled by `alpha`.
pub fn apply_inflation<T: Real>(ens: &Matrix<T>, alpha: T) -> Matrix<T> {
    if alpha == T::one() {
        return ens.clone();
    }
    let m = ensemble_mean(ens);
    let mut out = ens.clone();
    for i in 0..ens.rows() {
        for (x, &mu) in out.row_mut(i).iter_mut().zip(&m) {
            *x = mu + alpha * (*x - mu);
        }
    }
    out
}

pub(crate) fn check_ensemble<T: Real>(ens: &Matrix<T>, d_v: usize, op: &'static str) -> Result<()> {
    if ens.cols() != d_v {
        return Err(dim_mismatch(format!("{op}: ensemble has {} columns, state dimension is {d_v}", ens.cols())));
    }
    if ens.rows() < 2 {
        return Err(Error::InvalidConfig(format!("{op} needs at least two members")));
    }
    if !all_finite(ens.as_slice()) {
        return Err(Error::NonFinite(op));
    }
    Ok(())
}

/// `1 / N` as a scalar.
pub(crate) fn inv_n<T: Real>(n: usize) -> T {
    T::one() / lit::<T>(n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inflation_preserves_mean_and_scales_covariance() {
        let mut rng = RngStream::new(4, 0);
        let ens = Matrix::from_fn(7, 3, |_, _| rng.standard_normal::<f64>());
        assert_eq!(apply_inflation(&ens, 1.0), ens);
        let inf = apply_inflation(&ens, 2.0);
        let (m0, m1) = (ensemble_mean(&ens), ensemble_mean(&inf));
        for (a, b) in m0.iter().zip(&m1) {
            assert!((a - b).abs() < 1e-12);
        }
        let c0 = cross_covariance(&ens, &ens).unwrap();
        let c1 = cross_covariance(&inf, &inf).unwrap();
        assert!(c1.sub(&c0.scale(4.0)).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn anomalies_sum_to_zero() {
        let mut rng = RngStream::new(5, 0);
        let ens = Matrix::from_fn(5, 4, |_, _| rng.standard_normal::<f64>());
        let a = anomalies(&ens);
        assert!(ensemble_mean(&a).iter().all(|x| x.abs() < 1e-15));
    }
}
