use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::ks::{ks_base_profile, KsSolver};
use super::lorenz::{lorenz63_rhs, lorenz96_rhs_into, rk4_integrate};
use crate::error::{Error, Result};
use crate::numerics::{lit, sym_sqrt, Matrix, Real, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SystemName {
    Lorenz63,
    Lorenz96,
    Ks,
    Linear,
}

impl SystemName {
    pub fn as_str(self) -> &'static str {
        match self {
            SystemName::Lorenz63 => "lorenz63",
            SystemName::Lorenz96 => "lorenz96",
            SystemName::Ks => "ks",
            SystemName::Linear => "linear",
        }
    }
}

impl fmt::Display for SystemName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SystemName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lorenz63" | "l63" => Ok(SystemName::Lorenz63),
            "lorenz96" | "l96" => Ok(SystemName::Lorenz96),
            "ks" | "kuramoto-sivashinsky" => Ok(SystemName::Ks),
            "linear" => Ok(SystemName::Linear),
            other => Err(Error::InvalidConfig(format!("unknown system `{other}`"))),
        }
    }
}

/// Deterministic part of the dynamics, advancing one observation interval.
#[derive(Clone, Debug)]
pub enum Model<T: Real = f64> {
    Lorenz63 { sigma: T, rho: T, beta: T },
    Lorenz96 { forcing: T, dim: usize },
    Ks(Arc<KsSolver<T>>),
    Linear { a: Matrix<T> },
}

/// Coordinate-subsampling observation operator `h(v) = (v[o], v[o+s], ...)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObsOperator {
    pub state_dim: usize,
    pub stride: usize,
    pub offset: usize,
    pub obs_dim: usize,
}

impl ObsOperator {
    pub fn new(state_dim: usize, stride: usize, offset: usize, obs_dim: usize) -> Result<Self> {
        let last = offset + stride * obs_dim.saturating_sub(1);
        if stride == 0 || obs_dim == 0 || last >= state_dim {
            return Err(Error::IndexOutOfRange { index: last, len: state_dim });
        }
        Ok(Self { state_dim, stride, offset, obs_dim })
    }

    /// Every `stride`-th coordinate starting at `offset`.
    pub fn every(state_dim: usize, stride: usize, offset: usize) -> Result<Self> {
        let obs_dim = (state_dim.saturating_sub(offset) + stride - 1) / stride.max(1);
        Self::new(state_dim, stride, offset, obs_dim)
    }

    /// State index observed by observation component `l`.
    #[inline]
    pub fn index(&self, l: usize) -> usize {
        self.offset + l * self.stride
    }

    pub fn indices(&self) -> Vec<usize> {
        (0..self.obs_dim).map(|l| self.index(l)).collect()
    }

    pub fn apply<T: Real>(&self, v: &[T]) -> Vec<T> {
        (0..self.obs_dim).map(|l| v[self.index(l)]).collect()
    }

    /// Dense `d_y x d_v` selection matrix.
    pub fn matrix<T: Real>(&self) -> Matrix<T> {
        let mut h = Matrix::zeros(self.obs_dim, self.state_dim);
        for l in 0..self.obs_dim {
            h[(l, self.index(l))] = T::one();
        }
        h
    }
}

/// Subsamples `obs_dim` coordinates of `v` with the given stride and offset.
pub fn subsample_obs<T: Real>(v: &[T], stride: usize, offset: usize, obs_dim: usize) -> Result<Vec<T>> {
    Ok(ObsOperator::new(v.len(), stride, offset, obs_dim)?.apply(v))
}

/// Distribution of the state before burn-in.
#[derive(Clone, Debug)]
pub enum BaseState<T: Real = f64> {
    /// `N(mean * 1, std^2 I)`.
    Gaussian { mean: T, std: T },
    /// Fixed profile (KS).
    Profile(Vec<T>),
}

/// Number of noise-free model steps run from the base state before a
/// trajectory starts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum BurnIn {
    Fixed(u64),
    Uniform { min: u64, max: u64 },
}

impl BurnIn {
    /// The documented reproduction range `[10^3, 5 * 10^5]`.
    pub const FULL: BurnIn = BurnIn::Uniform { min: 1_000, max: 500_000 };

    pub fn draw(&self, rng: &mut RngStream) -> u64 {
        match *self {
            BurnIn::Fixed(n) => n,
            BurnIn::Uniform { min, max } => rng.uniform_int(min, max.max(min)),
        }
    }
}

/// Distance between state indices, used by localization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum IndexMetric {
    /// `min(|k - l|, period - |k - l|)`.
    Periodic { period: usize },
    /// No spatial structure; localization is not applicable.
    None,
}

impl IndexMetric {
    pub fn distance(&self, k: usize, l: usize) -> Option<f64> {
        match *self {
            IndexMetric::Periodic { period } => {
                let d = k.abs_diff(l) % period;
                Some(d.min(period - d) as f64)
            }
            IndexMetric::None => None,
        }
    }

    pub fn is_spatial(&self) -> bool {
        matches!(self, IndexMetric::Periodic { .. })
    }
}

/// A dynamical system together with its observation model and noise levels.
#[derive(Clone, Debug)]
pub struct SystemSpec<T: Real = f64> {
    pub name: SystemName,
    pub model: Model<T>,
    pub obs: ObsOperator,
    /// Process noise covariance `Sigma`.
    pub process_cov: Matrix<T>,
    /// Observation noise covariance `Gamma`.
    pub obs_cov: Matrix<T>,
    process_factor: Matrix<T>,
    obs_factor: Matrix<T>,
    pub dt: f64,
    pub substeps: usize,
    /// Magnitude clamp applied to learned-filter members.
    pub clamp: T,
    pub base: BaseState<T>,
    pub burn_in: BurnIn,
    pub metric: IndexMetric,
    pub sigma_v: f64,
    pub sigma_y: f64,
}

impl<T: Real> SystemSpec<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: SystemName,
        model: Model<T>,
        obs: ObsOperator,
        sigma_v: f64,
        sigma_y: f64,
        dt: f64,
        substeps: usize,
        clamp: f64,
        base: BaseState<T>,
        metric: IndexMetric,
    ) -> Result<Self> {
        let d_v = obs.state_dim;
        let process_cov = Matrix::scaled_identity(d_v, lit(sigma_v * sigma_v));
        let obs_cov = Matrix::scaled_identity(obs.obs_dim, lit(sigma_y * sigma_y));
        let mut spec = Self {
            name,
            model,
            obs,
            process_factor: Matrix::zeros(d_v, d_v),
            obs_factor: Matrix::zeros(obs.obs_dim, obs.obs_dim),
            process_cov,
            obs_cov,
            dt,
            substeps,
            clamp: lit(clamp),
            base,
            burn_in: BurnIn::FULL,
            metric,
            sigma_v,
            sigma_y,
        };
        spec.refresh_factors()?;
        Ok(spec)
    }

    /// Lorenz '63 with `h(v) = x`, `dt = 0.15` and five RK4 substeps.
    pub fn lorenz63(sigma_y: f64, sigma_v: f64) -> Result<Self> {
        Self::new(
            SystemName::Lorenz63,
            Model::Lorenz63 { sigma: lit(10.0), rho: lit(28.0), beta: lit(8.0 / 3.0) },
            ObsOperator::new(3, 1, 0, 1)?,
            sigma_v,
            sigma_y,
            0.15,
            5,
            60.0,
            BaseState::Gaussian { mean: T::zero(), std: T::one() },
            IndexMetric::None,
        )
    }

    /// Lorenz '96 with `d = 40`, `F = 8`, every fourth coordinate observed.
    pub fn lorenz96(sigma_y: f64, sigma_v: f64) -> Result<Self> {
        Self::lorenz96_with(40, 4, 0, sigma_y, sigma_v)
    }

    pub fn lorenz96_with(dim: usize, stride: usize, offset: usize, sigma_y: f64, sigma_v: f64) -> Result<Self> {
        if dim < 4 {
            return Err(Error::InvalidConfig("Lorenz '96 needs at least 4 coordinates".into()));
        }
        Self::new(
            SystemName::Lorenz96,
            Model::Lorenz96 { forcing: lit(8.0), dim },
            ObsOperator::every(dim, stride, offset)?,
            sigma_v,
            sigma_y,
            0.15,
            5,
            20.0,
            BaseState::Gaussian { mean: lit(5.0), std: T::one() },
            IndexMetric::Periodic { period: dim },
        )
    }

    /// Kuramoto-Sivashinsky on 128 points of `[0, 32 pi)`, every eighth observed.
    pub fn ks(sigma_y: f64, sigma_v: f64) -> Result<Self> {
        let n = 128;
        let length = 32.0 * std::f64::consts::PI;
        let substeps = 4;
        let dt = 1.0;
        Self::new(
            SystemName::Ks,
            Model::Ks(Arc::new(KsSolver::new(n, length, dt / substeps as f64))),
            ObsOperator::every(n, 8, 0)?,
            sigma_v,
            sigma_y,
            dt,
            substeps,
            10.0,
            BaseState::Profile(ks_base_profile(n, length)),
            IndexMetric::Periodic { period: n },
        )
    }

    /// Linear-Gaussian system `v' = A v` observing every other coordinate.
    pub fn linear(a: Matrix<T>, sigma_y: f64, sigma_v: f64) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::DimMismatch("linear dynamics needs a square A".into()));
        }
        let d = a.rows();
        Self::new(
            SystemName::Linear,
            Model::Linear { a },
            ObsOperator::every(d, 2, 0)?,
            sigma_v,
            sigma_y,
            1.0,
            1,
            1.0e6,
            BaseState::Gaussian { mean: T::zero(), std: T::one() },
            IndexMetric::None,
        )
    }

    /// Preset by name; `linear` uses [`rotation_blocks`] with default angles.
    pub fn preset(name: SystemName, sigma_y: f64, sigma_v: f64) -> Result<Self> {
        match name {
            SystemName::Lorenz63 => Self::lorenz63(sigma_y, sigma_v),
            SystemName::Lorenz96 => Self::lorenz96(sigma_y, sigma_v),
            SystemName::Ks => Self::ks(sigma_y, sigma_v),
            SystemName::Linear => Self::linear(rotation_blocks(&DEFAULT_ROTATION_ANGLES), sigma_y, sigma_v),
        }
    }

    pub fn with_burn_in(mut self, burn_in: BurnIn) -> Self {
        self.burn_in = burn_in;
        self
    }

    pub fn with_obs(mut self, obs: ObsOperator) -> Result<Self> {
        if obs.state_dim != self.state_dim() {
            return Err(Error::DimMismatch("observation operator state dimension".into()));
        }
        self.obs = obs;
        self.obs_cov = Matrix::scaled_identity(obs.obs_dim, lit(self.sigma_y * self.sigma_y));
        self.refresh_factors()?;
        Ok(self)
    }

    /// Replaces both noise covariances.
    pub fn with_noise(mut self, process_cov: Matrix<T>, obs_cov: Matrix<T>) -> Result<Self> {
        if process_cov.rows() != self.state_dim() || obs_cov.rows() != self.obs_dim() {
            return Err(Error::DimMismatch("noise covariance dimensions".into()));
        }
        self.process_cov = process_cov;
        self.obs_cov = obs_cov;
        self.refresh_factors()?;
        Ok(self)
    }

    fn refresh_factors(&mut self) -> Result<()> {
        self.process_factor = sym_sqrt(&self.process_cov)?;
        self.obs_factor = sym_sqrt(&self.obs_cov)?;
        Ok(())
    }

    #[inline]
    pub fn state_dim(&self) -> usize {
        self.obs.state_dim
    }

    #[inline]
    pub fn obs_dim(&self) -> usize {
        self.obs.obs_dim
    }

    pub fn process_factor(&self) -> &Matrix<T> {
        &self.process_factor
    }

    pub fn obs_factor(&self) -> &Matrix<T> {
        &self.obs_factor
    }

    pub fn has_process_noise(&self) -> bool {
        self.process_cov.max_abs() > T::zero()
    }

    pub fn observe(&self, v: &[T]) -> Vec<T> {
        self.obs.apply(v)
    }

    /// Deterministic map `Psi` over one observation interval.
    pub fn step(&self, v: &[T]) -> Result<Vec<T>> {
        let dt: T = lit(self.dt);
        match &self.model {
            Model::Lorenz63 { sigma, rho, beta } => {
                let (s, r, b) = (*sigma, *rho, *beta);
                rk4_integrate(
                    |x: &[T], out: &mut [T]| out.copy_from_slice(&lorenz63_rhs(x, s, r, b)),
                    v,
                    dt,
                    self.substeps,
                )
            }
            Model::Lorenz96 { forcing, .. } => {
                let f = *forcing;
                rk4_integrate(|x: &[T], out: &mut [T]| lorenz96_rhs_into(x, f, out), v, dt, self.substeps)
            }
            Model::Ks(solver) => solver.step(v, self.substeps),
            Model::Linear { a } => a.mul_vec(v),
        }
    }

    /// Draws a pre-burn-in state.
    pub fn sample_base(&self, rng: &mut RngStream) -> Vec<T> {
        match &self.base {
            BaseState::Gaussian { mean, std } => {
                (0..self.state_dim()).map(|_| *mean + *std * rng.standard_normal::<T>()).collect()
            }
            BaseState::Profile(p) => p.clone(),
        }
    }

    /// Parameter summary recorded in manifests and run metadata.
    pub fn describe(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("system".to_string(), self.name.to_string()),
            ("state_dim".into(), self.state_dim().to_string()),
            ("obs_dim".into(), self.obs_dim().to_string()),
            ("obs_stride".into(), self.obs.stride.to_string()),
            ("obs_offset".into(), self.obs.offset.to_string()),
            ("dt".into(), self.dt.to_string()),
            ("substeps".into(), self.substeps.to_string()),
            ("sigma_v".into(), self.sigma_v.to_string()),
            ("sigma_y".into(), self.sigma_y.to_string()),
            ("clamp".into(), self.clamp.to_string()),
        ];
        match &self.model {
            Model::Lorenz63 { sigma, rho, beta } => {
                out.push(("sigma".into(), sigma.to_string()));
                out.push(("rho".into(), rho.to_string()));
                out.push(("beta".into(), beta.to_string()));
            }
            Model::Lorenz96 { forcing, .. } => out.push(("forcing".into(), forcing.to_string())),
            Model::Ks(s) => {
                out.push(("domain_length".into(), s.domain_length().to_string()));
                out.push(("grid".into(), s.grid_size().to_string()));
            }
            Model::Linear { .. } => {}
        }
        out
    }
}

/// Rotation angles for the 10-dimensional linear test system.
pub const DEFAULT_ROTATION_ANGLES: [f64; 5] = [0.1, 0.23, 0.37, 0.52, 0.71];

/// Block-diagonal matrix of 2x2 rotations; every eigenvalue has modulus one.
pub fn rotation_blocks<T: Real>(angles: &[f64]) -> Matrix<T> {
    let d = 2 * angles.len();
    let mut a = Matrix::zeros(d, d);
    for (b, &th) in angles.iter().enumerate() {
        let (s, c) = th.sin_cos();
        let i = 2 * b;
        a[(i, i)] = lit(c);
        a[(i, i + 1)] = lit(-s);
        a[(i + 1, i)] = lit(s);
        a[(i + 1, i + 1)] = lit(c);
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lorenz96_observation_indices() {
        let obs = ObsOperator::every(40, 4, 0).unwrap();
        assert_eq!(obs.indices(), (0..10).map(|i| 4 * i).collect::<Vec<_>>());
        let ks = ObsOperator::every(128, 8, 0).unwrap();
        assert_eq!(ks.obs_dim, 16);
    }

    #[test]
    fn stride_one_is_identity_prefix() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(subsample_obs(&v, 1, 0, 3).unwrap(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn out_of_range_subsample() {
        let v = [0.0f64; 8];
        assert!(matches!(subsample_obs(&v, 4, 1, 3), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn periodic_distance() {
        let m = IndexMetric::Periodic { period: 40 };
        assert_eq!(m.distance(0, 39), Some(1.0));
        assert_eq!(m.distance(3, 23), Some(20.0));
        assert_eq!(m.distance(5, 5), Some(0.0));
        assert_eq!(IndexMetric::None.distance(0, 1), None);
    }

    #[test]
    fn rotation_blocks_are_orthogonal() {
        let a: Matrix<f64> = rotation_blocks(&DEFAULT_ROTATION_ANGLES);
        let ata = a.t_matmul(&a).unwrap();
        assert!(ata.sub(&Matrix::identity(10)).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn presets_have_documented_shapes() {
        let l63 = SystemSpec::<f64>::lorenz63(1.0, 0.0).unwrap();
        assert_eq!((l63.state_dim(), l63.obs_dim()), (3, 1));
        let l96 = SystemSpec::<f64>::lorenz96(1.0, 0.0).unwrap();
        assert_eq!((l96.state_dim(), l96.obs_dim()), (40, 10));
        let ks = SystemSpec::<f64>::ks(1.0, 0.0).unwrap();
        assert_eq!((ks.state_dim(), ks.obs_dim()), (128, 16));
        let lin = SystemSpec::<f64>::preset(SystemName::Linear, 1.0, 0.01).unwrap();
        assert_eq!((lin.state_dim(), lin.obs_dim()), (10, 5));
        assert_eq!(l96.clamp, 20.0);
        assert_eq!(ks.clamp, 10.0);
        assert_eq!(l63.clamp, 60.0);
    }

    #[test]
    fn names_round_trip() {
        for n in [SystemName::Lorenz63, SystemName::Lorenz96, SystemName::Ks, SystemName::Linear] {
            assert_eq!(n.as_str().parse::<SystemName>().unwrap(), n);
        }
    }
}
