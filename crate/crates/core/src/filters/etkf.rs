//! Deterministic square-root filters in ensemble space: the global ensemble
//! transform (ESRF) and its per-coordinate localized form (LETKF).
//!
//! With anomalies `X` (`N x d_v`, rows are members), observed anomalies `Y`,
//! `M = I + Y R^{-1} Y^T / N`, the analysis is `1 m^T + W X` where
//! `W = 1 w^T / sqrt(N) + M^{-1/2}` and `w = M^{-1} Y R^{-1} (y - h_mean) / sqrt(N)`.

use super::ensemble::{anomalies, apply_inflation, check_ensemble, ensemble_mean, observe_ensemble};
use super::localization::LocalizationSpec;
use crate::dynamics::ObsOperator;
use crate::error::{dim_mismatch, Result};
use crate::numerics::{lit, solve_spd, sym_eig, sym_sqrt, Matrix, Real};

/// Spectral form of `I + B B^T` for a tall `B` (`N x p`): with
/// `B^T B = U diag(lambda) U^T` and `Q = B U`, any spectral function is
/// `f(I + B B^T) = I + Q diag((f(1 + lambda) - 1) / lambda) Q^T`, which costs a
/// `p x p` eigenproblem instead of an `N x N` one.
pub(crate) struct LowRankShift<T: Real> {
    q: Matrix<T>,
    lambda: Vec<T>,
}

impl<T: Real> LowRankShift<T> {
    pub(crate) fn new(b: &Matrix<T>) -> Result<Self> {
        let eig = sym_eig(&b.t_matmul(b)?.symmetrize())?;
        let q = b.matmul(&eig.vectors)?;
        let lambda = eig.values.into_iter().map(|l| l.max(T::zero())).collect();
        Ok(Self { q, lambda })
    }

    /// `I + Q diag(phi(lambda)) Q^T` where `phi(l) = (f(1 + l) - 1) / l`.
    pub(crate) fn apply(&self, phi: impl Fn(T) -> T) -> Matrix<T> {
        let n = self.q.rows();
        let mut scaled = self.q.clone();
        for (j, &l) in self.lambda.iter().enumerate() {
            let c = phi(l);
            for i in 0..n {
                scaled[(i, j)] *= c;
            }
        }
        let mut out = scaled.matmul_t(&self.q).expect("matching factors").symmetrize();
        for i in 0..n {
            out[(i, i)] += T::one();
        }
        out
    }

    /// `(I + B B^T)^{-1}`.
    pub(crate) fn inverse(&self) -> Matrix<T> {
        self.apply(|l| -T::one() / (T::one() + l))
    }

    /// `(I + B B^T)^{-1/2}`.
    pub(crate) fn inv_sqrt(&self) -> Matrix<T> {
        self.apply(|l| {
            let r = (T::one() + l).sqrt();
            -T::one() / (r * (T::one() + r))
        })
    }

    /// `(I + B B^T)^{1/2}`.
    pub(crate) fn sqrt(&self) -> Matrix<T> {
        self.apply(|l| T::one() / ((T::one() + l).sqrt() + T::one()))
    }
}

/// Ensemble-space weights `W` (`N x N`) for observed anomalies `y_anom`
/// (`N x p`), inverse observation covariance `rinv` (`p x p`) and innovation `d`.
pub fn transform_weights<T: Real>(y_anom: &Matrix<T>, rinv: &Matrix<T>, d: &[T]) -> Result<Matrix<T>> {
    let n = y_anom.rows();
    let sqrt_n = lit::<T>(n as f64).sqrt();
    let b = y_anom.matmul(&sym_sqrt(rinv)?)?.scale(T::one() / sqrt_n);
    let shift = LowRankShift::new(&b)?;
    let g: Vec<T> = y_anom.matmul(rinv)?.mul_vec(d)?.into_iter().map(|x| x / sqrt_n).collect();
    let w = shift.inverse().mul_vec(&g)?;
    let mut out = shift.inv_sqrt();
    for i in 0..n {
        for j in 0..n {
            out[(i, j)] += w[j] / sqrt_n;
        }
    }
    Ok(out)
}

fn inverse_spd<T: Real>(a: &Matrix<T>) -> Result<Matrix<T>> {
    solve_spd(a, &Matrix::identity(a.rows()))
}

/// Global ensemble square-root analysis. The analysis covariance equals
/// `(I - K H) C` with `C` the forecast covariance.
pub fn esrf_analysis<T: Real>(forecast: &Matrix<T>, y: &[T], obs: &ObsOperator, gamma: &Matrix<T>) -> Result<Matrix<T>> {
    check_ensemble(forecast, obs.state_dim, "esrf_analysis")?;
    if y.len() != obs.obs_dim {
        return Err(dim_mismatch("esrf_analysis: observation length"));
    }
    let mean = ensemble_mean(forecast);
    let x = anomalies(forecast);
    let hv = observe_ensemble(obs, forecast);
    let h_mean = ensemble_mean(&hv);
    let y_anom = anomalies(&hv);
    let d: Vec<T> = y.iter().zip(&h_mean).map(|(&a, &b)| a - b).collect();
    let w = transform_weights(&y_anom, &inverse_spd(gamma)?, &d)?;
    let mut out = w.matmul(&x)?;
    for i in 0..out.rows() {
        for (o, &m) in out.row_mut(i).iter_mut().zip(&mean) {
            *o += m;
        }
    }
    Ok(out)
}

/// Local ensemble transform Kalman filter followed by multiplicative
/// inflation `alpha`. Coordinate `k` assimilates observations weighted by the
/// taper of their distance to `k`; with no observation in range it keeps the
/// forecast.
pub fn letkf_analysis<T: Real>(
    forecast: &Matrix<T>,
    y: &[T],
    obs: &ObsOperator,
    gamma: &Matrix<T>,
    loc: &LocalizationSpec,
    alpha: T,
) -> Result<Matrix<T>> {
    check_ensemble(forecast, obs.state_dim, "letkf_analysis")?;
    if y.len() != obs.obs_dim {
        return Err(dim_mismatch("letkf_analysis: observation length"));
    }
    let n = forecast.rows();
    let mean = ensemble_mean(forecast);
    let x = anomalies(forecast);
    let hv = observe_ensemble(obs, forecast);
    let h_mean = ensemble_mean(&hv);
    let y_anom = anomalies(&hv);
    let rinv = inverse_spd(gamma)?;
    let mut out = forecast.clone();
    let mut cached: Option<(Vec<f64>, Matrix<T>)> = None;
    for k in 0..obs.state_dim {
        let rho: Vec<f64> = (0..obs.obs_dim).map(|l| loc.weight(k, obs.index(l))).collect();
        let active: Vec<usize> = (0..obs.obs_dim).filter(|&l| rho[l] > 0.0).collect();
        if active.is_empty() {
            continue;
        }
        let reuse = matches!(&cached, Some((key, _)) if *key == rho);
        if !reuse {
            let p = active.len();
            let ya = Matrix::from_fn(n, p, |i, a| y_anom[(i, active[a])]);
            let r_loc = Matrix::from_fn(p, p, |a, b| {
                let (la, lb) = (active[a], active[b]);
                rinv[(la, lb)] * lit::<T>((rho[la] * rho[lb]).sqrt())
            });
            let d: Vec<T> = active.iter().map(|&l| y[l] - h_mean[l]).collect();
            cached = Some((rho, transform_weights(&ya, &r_loc, &d)?));
        }
        let w = &cached.as_ref().expect("weights computed above").1;
        for i in 0..n {
            let mut acc = mean[k];
            for j in 0..n {
                acc += w[(i, j)] * x[(j, k)];
            }
            out[(i, k)] = acc;
        }
    }
    Ok(apply_inflation(&out, alpha))
}
