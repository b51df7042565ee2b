//! Iterative EnKF: Gauss-Newton iteration in ensemble space on the lag-1
//! smoothing objective, transform version with re-propagation.

use super::ensemble::{anomalies, check_ensemble, ensemble_mean, observe_ensemble};
use super::etkf::LowRankShift;
use crate::dynamics::SystemSpec;
use crate::error::{dim_mismatch, Error, Result};
use crate::numerics::{lit, norm2, solve_spd, sym_sqrt, Matrix, Real};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IenkfConfig {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for IenkfConfig {
    fn default() -> Self {
        Self { max_iter: 10, tol: 1e-5 }
    }
}

#[derive(Clone, Debug)]
pub struct IenkfOutcome<T: Real = f64> {
    /// Filtering ensemble at the new observation time.
    pub ensemble: Matrix<T>,
    /// Gauss-Newton updates performed.
    pub iterations: usize,
    pub converged: bool,
}

/// Propagates `x0 + S0 w + A0 T` (rows: members) and adds fixed process noise.
fn propagate<T: Real>(
    spec: &SystemSpec<T>,
    x0: &[T],
    a0: &Matrix<T>,
    w: &[T],
    t: &Matrix<T>,
    noise: &Matrix<T>,
) -> Result<Matrix<T>> {
    let n = a0.rows();
    let inv_sqrt_n = T::one() / lit::<T>(n as f64).sqrt();
    let mut centre = x0.to_vec();
    for j in 0..n {
        for (c, &a) in centre.iter_mut().zip(a0.row(j)) {
            *c += w[j] * inv_sqrt_n * a;
        }
    }
    let anom = t.matmul(a0)?;
    let mut out = Matrix::zeros(n, x0.len());
    for i in 0..n {
        let member: Vec<T> = centre.iter().zip(anom.row(i)).map(|(&c, &a)| c + a).collect();
        let next = spec.step(&member)?;
        for ((o, x), e) in out.row_mut(i).iter_mut().zip(next).zip(noise.row(i)) {
            *o = x + *e;
        }
    }
    Ok(out)
}

/// One IEnKF cycle from the previous analysis ensemble to the analysis at
/// the next observation `y`. `process_noise` rows are reused across iterations.
pub fn ienkf_analysis<T: Real>(
    prev_analysis: &Matrix<T>,
    spec: &SystemSpec<T>,
    y: &[T],
    process_noise: &Matrix<T>,
    cfg: IenkfConfig,
) -> Result<IenkfOutcome<T>> {
    if cfg.max_iter == 0 {
        return Err(Error::InvalidConfig("IEnKF needs max_iter >= 1".into()));
    }
    check_ensemble(prev_analysis, spec.state_dim(), "ienkf_analysis")?;
    if y.len() != spec.obs_dim() || process_noise.rows() != prev_analysis.rows() {
        return Err(dim_mismatch("ienkf_analysis: observation or noise shape"));
    }
    let n = prev_analysis.rows();
    let sqrt_n = lit::<T>(n as f64).sqrt();
    let x0 = ensemble_mean(prev_analysis);
    let a0 = anomalies(prev_analysis);
    let rinv = solve_spd(&spec.obs_cov, &Matrix::identity(spec.obs_dim()))?;
    let rinv_half = sym_sqrt(&rinv)?;
    let mut w = vec![T::zero(); n];
    let mut t = Matrix::identity(n);
    let mut t_inv = Matrix::identity(n);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iter {
        let fc = propagate(spec, &x0, &a0, &w, &t, process_noise)?;
        let hv = observe_ensemble(&spec.obs, &fc);
        let h_mean = ensemble_mean(&hv);
        // sensitivities with the current transform undone
        let s_y = t_inv.matmul(&anomalies(&hv))?.scale(T::one() / sqrt_n);
        let d: Vec<T> = y.iter().zip(&h_mean).map(|(&a, &b)| a - b).collect();
        let grad: Vec<T> = s_y.matmul(&rinv)?.mul_vec(&d)?.iter().zip(&w).map(|(&g, &wi)| g - wi).collect();
        // Hessian I + s_y R^{-1} s_y^T in low-rank form
        let hess = LowRankShift::new(&s_y.matmul(&rinv_half)?)?;
        let dw = hess.inverse().mul_vec(&grad)?;
        for (wi, di) in w.iter_mut().zip(&dw) {
            *wi += *di;
        }
        t = hess.inv_sqrt();
        t_inv = hess.sqrt();
        iterations += 1;
        if !crate::numerics::all_finite(&w) {
            return Err(Error::NonFinite("ienkf_analysis"));
        }
        if norm2(&dw) < lit(cfg.tol) {
            converged = true;
            break;
        }
    }
    let ensemble = propagate(spec, &x0, &a0, &w, &t, process_noise)?;
    if !ensemble.is_finite() {
        return Err(Error::NonFinite("ienkf_analysis"));
    }
    Ok(IenkfOutcome { ensemble, iterations, converged })
}
