use super::ensemble::{anomalies, check_ensemble, inv_n, observe_ensemble};
use super::localization::LocalizationSpec;
use crate::dynamics::ObsOperator;
use crate::error::{dim_mismatch, Result};
use crate::numerics::{solve_spd, Matrix, Real};

/// Precomputed Hadamard masks `L^{vh}` and `L^{hh}`.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalizationMasks<T: Real = f64> {
    pub state_obs: Matrix<T>,
    pub obs_obs: Matrix<T>,
}

impl<T: Real> LocalizationMasks<T> {
    pub fn new(loc: &LocalizationSpec, obs: &ObsOperator) -> Self {
        Self { state_obs: loc.state_obs_mask(obs), obs_obs: loc.obs_obs_mask(obs) }
    }
}

/// Empirical `C^{vh}` (`d_v x d_y`) and `C^{hh}` (`d_y x d_y`) with `1/N` normalization.
pub fn enkf_covariances<T: Real>(forecast: &Matrix<T>, obs: &ObsOperator) -> Result<(Matrix<T>, Matrix<T>)> {
    let n = forecast.rows();
    let x = anomalies(forecast);
    let hx = anomalies(&observe_ensemble(obs, forecast));
    let c_vh = x.t_matmul(&hx)?.scale(inv_n(n));
    let c_hh = hx.t_matmul(&hx)?.scale(inv_n(n));
    Ok((c_vh, c_hh))
}

/// Gain `K = (C^{vh} o L^{vh}) (C^{hh} o L^{hh} + Gamma)^{-1}`, returned transposed (`d_y x d_v`).
pub fn enkf_gain_transposed<T: Real>(
    forecast: &Matrix<T>,
    obs: &ObsOperator,
    gamma: &Matrix<T>,
    loc: Option<&LocalizationMasks<T>>,
) -> Result<Matrix<T>> {
    let (mut c_vh, mut c_hh) = enkf_covariances(forecast, obs)?;
    if let Some(m) = loc {
        c_vh = c_vh.hadamard(&m.state_obs)?;
        c_hh = c_hh.hadamard(&m.obs_obs)?;
    }
    solve_spd(&c_hh.add(gamma)?, &c_vh.transpose())
}

/// Perturbed-observation EnKF analysis. Member `n` is moved by
/// `K (y - h(v^(n)) - eta^(n))` with `eta` taken row-wise from `obs_noise`.
pub fn enkf_analysis<T: Real>(
    forecast: &Matrix<T>,
    y: &[T],
    obs: &ObsOperator,
    gamma: &Matrix<T>,
    obs_noise: &Matrix<T>,
    loc: Option<&LocalizationMasks<T>>,
) -> Result<Matrix<T>> {
    check_ensemble(forecast, obs.state_dim, "enkf_analysis")?;
    let n = forecast.rows();
    if y.len() != obs.obs_dim || obs_noise.rows() != n || obs_noise.cols() != obs.obs_dim {
        return Err(dim_mismatch("enkf_analysis: observation or noise shape"));
    }
    let kt = enkf_gain_transposed(forecast, obs, gamma, loc)?;
    let hv = observe_ensemble(obs, forecast);
    let innov = Matrix::from_fn(n, obs.obs_dim, |i, l| y[l] - hv[(i, l)] - obs_noise[(i, l)]);
    forecast.add(&innov.matmul(&kt)?)
}
