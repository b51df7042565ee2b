use std::fmt;
use std::str::FromStr;

use super::enkf::{enkf_analysis, LocalizationMasks};
use super::ensemble::{apply_inflation, ensemble_mean, initial_ensemble, predict, StepNoise};
use super::etkf::{esrf_analysis, letkf_analysis};
use super::ienkf::{ienkf_analysis, IenkfConfig};
use super::localization::LocalizationSpec;
use crate::dynamics::{SystemSpec, TruthRun};
use crate::error::{Error, Result};
use crate::numerics::{lit, Matrix, Real, RngStream};

/// Stream tag separating filter-run draws from data generation.
const RUN_TAG: u64 = 0x52_554e;

/// Random stream for the run of one method family on trajectory `traj`.
/// Methods sharing a seed see identical initial ensembles and noise.
pub fn run_stream(seed: u64, traj: usize) -> RngStream {
    RngStream::derived(seed, &[RUN_TAG, traj as u64])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FilterMethod {
    Enkf,
    Esrf,
    Letkf,
    Ienkf,
    Mnmef,
}

impl FilterMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            FilterMethod::Enkf => "enkf",
            FilterMethod::Esrf => "esrf",
            FilterMethod::Letkf => "letkf",
            FilterMethod::Ienkf => "ienkf",
            FilterMethod::Mnmef => "mnmef",
        }
    }
}

impl fmt::Display for FilterMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FilterMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "enkf" => Ok(FilterMethod::Enkf),
            "esrf" => Ok(FilterMethod::Esrf),
            "letkf" => Ok(FilterMethod::Letkf),
            "ienkf" => Ok(FilterMethod::Ienkf),
            "mnmef" => Ok(FilterMethod::Mnmef),
            other => Err(Error::InvalidConfig(format!("unknown filter method `{other}`"))),
        }
    }
}

/// Settings of a classical filter run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassicConfig {
    pub method: FilterMethod,
    pub members: usize,
    /// Multiplicative inflation applied after every analysis.
    pub alpha: f64,
    /// Localization radius; `None` disables localization (EnKF) or means an
    /// unbounded radius (LETKF).
    pub radius: Option<f64>,
    pub ienkf: IenkfConfig,
}

impl ClassicConfig {
    pub fn new(method: FilterMethod, members: usize) -> Self {
        Self { method, members, alpha: 1.0, radius: None, ienkf: IenkfConfig::default() }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_radius(mut self, radius: Option<f64>) -> Self {
        self.radius = radius;
        self
    }
}

/// One assimilation run over a truth trajectory.
#[derive(Clone, Debug)]
pub struct RunRecord<T: Real = f64> {
    pub method: String,
    pub trajectory: usize,
    pub members: usize,
    /// Row `j` is the ensemble mean at step `j`, starting from the initial ensemble.
    pub means: Matrix<T>,
    /// Per-step ensembles when requested.
    pub ensembles: Option<Vec<Matrix<T>>>,
    /// Reason the run stopped early (filter divergence).
    pub failure: Option<String>,
}

impl<T: Real> RunRecord<T> {
    pub fn diverged(&self) -> bool {
        self.failure.is_some()
    }

    /// Relative RMSE against the truth over steps `1..=J`; NaN if the run diverged.
    pub fn r_rmse(&self, truth: &TruthRun<T>) -> f64 {
        if self.diverged() {
            return f64::NAN;
        }
        let est = Matrix::from_fn(truth.steps(), self.means.cols(), |j, k| self.means[(j + 1, k)]);
        let tr = Matrix::from_fn(truth.steps(), truth.states.cols(), |j, k| truth.states[(j + 1, k)]);
        crate::eval::r_rmse(&est, &tr).unwrap_or(f64::NAN)
    }
}

/// Whether an error is a numerical breakdown of the filter rather than misuse.
pub fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::NonFinite(_) | Error::NotSpd { .. } | Error::EigFailure { .. })
}

/// Drives `analysis(j, ensemble, noise, y_j)` over a trajectory from the
/// initial ensemble `N(v_0, I)`. Numerical breakdowns end the run and are
/// recorded; other errors propagate.
pub fn run_assimilation<T: Real>(
    spec: &SystemSpec<T>,
    truth: &TruthRun<T>,
    trajectory: usize,
    members: usize,
    seed: u64,
    method: &str,
    keep_ensembles: bool,
    mut analysis: impl FnMut(usize, &Matrix<T>, &StepNoise<T>, &[T]) -> Result<Matrix<T>>,
) -> Result<RunRecord<T>> {
    if members < 2 {
        return Err(Error::InvalidConfig("ensemble size must be at least 2".into()));
    }
    let mut rng = run_stream(seed, trajectory);
    let c0 = Matrix::identity(spec.state_dim());
    let mut ens = initial_ensemble(truth.initial_state(), members, &c0, &mut rng)?;
    let mut means = vec![ensemble_mean(&ens)];
    let mut ensembles = keep_ensembles.then(|| vec![ens.clone()]);
    let mut failure = None;
    for j in 1..=truth.steps() {
        let noise = StepNoise::draw(spec, members, &mut rng)?;
        match analysis(j, &ens, &noise, truth.observation(j)) {
            Ok(next) if next.is_finite() => ens = next,
            Ok(_) => {
                failure = Some(format!("non-finite ensemble at step {j}"));
                break;
            }
            Err(e) if is_divergence(&e) => {
                failure = Some(format!("step {j}: {e}"));
                break;
            }
            Err(e) => return Err(e),
        }
        means.push(ensemble_mean(&ens));
        if let Some(v) = ensembles.as_mut() {
            v.push(ens.clone());
        }
    }
    let d_v = spec.state_dim();
    let rows = means.len();
    let means = Matrix::from_vec(rows, d_v, means.into_iter().flatten().collect())?;
    Ok(RunRecord { method: method.to_string(), trajectory, members, means, ensembles, failure })
}

/// Runs a classical filter over one trajectory.
pub fn run_classic<T: Real>(
    spec: &SystemSpec<T>,
    truth: &TruthRun<T>,
    trajectory: usize,
    cfg: &ClassicConfig,
    seed: u64,
    keep_ensembles: bool,
) -> Result<RunRecord<T>> {
    let alpha: T = lit(cfg.alpha);
    if !(cfg.alpha >= 1.0) {
        return Err(Error::InvalidConfig(format!("inflation must be at least 1, got {}", cfg.alpha)));
    }
    let loc = match cfg.radius {
        Some(r) => Some(LocalizationSpec::new(spec.metric, r)?),
        None => None,
    };
    let masks = loc.as_ref().map(|l| LocalizationMasks::new(l, &spec.obs));
    let global = LocalizationSpec {
        metric: crate::dynamics::IndexMetric::Periodic { period: spec.state_dim() },
        radius: f64::INFINITY,
        radius_scale: 1.0,
    };
    let name = cfg.method.as_str();
    run_assimilation(spec, truth, trajectory, cfg.members, seed, name, keep_ensembles, |_, ens, noise, y| {
        let out = match cfg.method {
            FilterMethod::Enkf => {
                let fc = predict(spec, ens, &noise.process)?;
                enkf_analysis(&fc, y, &spec.obs, &spec.obs_cov, &noise.obs, masks.as_ref())?
            }
            FilterMethod::Esrf => {
                let fc = predict(spec, ens, &noise.process)?;
                esrf_analysis(&fc, y, &spec.obs, &spec.obs_cov)?
            }
            FilterMethod::Letkf => {
                let fc = predict(spec, ens, &noise.process)?;
                return letkf_analysis(&fc, y, &spec.obs, &spec.obs_cov, loc.as_ref().unwrap_or(&global), alpha);
            }
            FilterMethod::Ienkf => ienkf_analysis(ens, spec, y, &noise.process, cfg.ienkf)?.ensemble,
            FilterMethod::Mnmef => {
                return Err(Error::InvalidConfig("the learned filter is run through the mnmef module".into()))
            }
        };
        Ok(apply_inflation(&out, alpha))
    })
}
