use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use super::harness::write_csv;
use super::metrics::{mean, w2_gaussian};
use crate::dynamics::{generate_dataset, rotation_blocks, BurnIn, DatasetMode, Model, SystemSpec, TruthRun, DEFAULT_ROTATION_ANGLES};
use crate::error::{Error, Result};
use crate::filters::{cross_covariance, ensemble_mean, kalman_step, KalmanBelief};
use crate::mnmef::{Mnmef, MnmefConfig, StepOptions};
use crate::numerics::{sample_gaussian, sym_sqrt, Matrix, RngStream};
use crate::training::{train, LossKind, TrainConfig};

const BASELINE_TAG: u64 = 0x4241_5345;
const TEST_STREAM_OFFSET: u64 = 1 << 32;

/// Loss normalization and weight decay of one training run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LinearSetting {
    RelativeDecay,
    Relative,
    UnnormalizedDecay,
    Unnormalized,
}

impl LinearSetting {
    pub const ALL: [LinearSetting; 4] =
        [LinearSetting::RelativeDecay, LinearSetting::Relative, LinearSetting::UnnormalizedDecay, LinearSetting::Unnormalized];

    pub fn as_str(self) -> &'static str {
        match self {
            LinearSetting::RelativeDecay => "NL2(WD)",
            LinearSetting::Relative => "NL2",
            LinearSetting::UnnormalizedDecay => "L2(WD)",
            LinearSetting::Unnormalized => "L2",
        }
    }

    pub fn loss(self) -> LossKind {
        match self {
            LinearSetting::RelativeDecay | LinearSetting::Relative => LossKind::Relative,
            _ => LossKind::Unnormalized,
        }
    }

    pub fn decays(self) -> bool {
        matches!(self, LinearSetting::RelativeDecay | LinearSetting::UnnormalizedDecay)
    }
}

impl fmt::Display for LinearSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LinearSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LinearSetting::ALL
            .into_iter()
            .find(|x| x.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown linear setting `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearExperimentConfig {
    pub dim: usize,
    pub sigma_y: f64,
    pub sigma_v: f64,
    pub train_trajectories: usize,
    pub train_steps: usize,
    pub test_trajectories: usize,
    pub test_steps: usize,
    pub train: TrainConfig,
    /// Weight decay of the decayed settings.
    pub weight_decay: f64,
    pub settings: Vec<LinearSetting>,
}

impl Default for LinearExperimentConfig {
    fn default() -> Self {
        Self {
            dim: 10,
            sigma_y: 1.0,
            sigma_v: 0.01,
            train_trajectories: 64,
            train_steps: 30,
            test_trajectories: 16,
            test_steps: 100,
            train: TrainConfig { epochs: 10, ..TrainConfig::default() },
            weight_decay: 1e-2,
            settings: LinearSetting::ALL.to_vec(),
        }
    }
}

/// The linear-Gaussian system: block rotations (unit-modulus spectrum),
/// every other coordinate observed.
pub fn linear_system(dim: usize, sigma_y: f64, sigma_v: f64) -> Result<SystemSpec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) || dim / 2 > DEFAULT_ROTATION_ANGLES.len() {
        return Err(Error::InvalidConfig(format!(
            "linear state dimension must be even and at most {}",
            2 * DEFAULT_ROTATION_ANGLES.len()
        )));
    }
    let a = rotation_blocks(&DEFAULT_ROTATION_ANGLES[..dim / 2]);
    Ok(SystemSpec::linear(a, sigma_y, sigma_v)?.with_burn_in(BurnIn::Fixed(0)))
}

/// Exact filtering distributions for steps `1..=J` from `N(v_0, I)`.
pub fn kalman_track(spec: &SystemSpec<f64>, truth: &TruthRun<f64>) -> Result<Vec<KalmanBelief<f64>>> {
    let Model::Linear { a } = &spec.model else {
        return Err(Error::InvalidConfig("the Kalman filter needs linear dynamics".into()));
    };
    let h = spec.obs.matrix::<f64>();
    let mut b = KalmanBelief { mean: truth.initial_state().to_vec(), cov: Matrix::identity(spec.state_dim()) };
    let mut out = Vec::with_capacity(truth.steps());
    for j in 1..=truth.steps() {
        b = kalman_step(&b, a, &h, &spec.process_cov, &spec.obs_cov, truth.observation(j))?;
        out.push(b.clone());
    }
    Ok(out)
}

/// Time-averaged `W_2` between the Gaussian fitted to each ensemble (steps
/// `1..=J`) and the Kalman belief.
pub fn ensemble_w2(ensembles: &[Matrix<f64>], kalman: &[KalmanBelief<f64>]) -> Result<f64> {
    let mut total = 0.0;
    for (e, k) in ensembles.iter().skip(1).zip(kalman) {
        total += w2_gaussian(&ensemble_mean(e), &cross_covariance(e, e)?, &k.mean, &k.cov)?;
    }
    Ok(total / kalman.len() as f64)
}

/// Time-averaged `W_2` of `members` i.i.d. draws from each Kalman belief.
pub fn sampling_baseline(kalman: &[KalmanBelief<f64>], members: usize, rng: &mut RngStream) -> Result<f64> {
    let mut total = 0.0;
    for k in kalman {
        let factor = sym_sqrt(&k.cov)?;
        let rows = (0..members).map(|_| sample_gaussian(rng, &k.mean, &factor)).collect::<Result<Vec<_>>>()?;
        let e = Matrix::from_rows(&rows)?;
        total += w2_gaussian(&ensemble_mean(&e), &cross_covariance(&e, &e)?, &k.mean, &k.cov)?;
    }
    Ok(total / kalman.len() as f64)
}

/// Held-out trajectories with their Kalman tracks.
pub struct LinearTestSet {
    pub spec: Arc<SystemSpec<f64>>,
    pub truths: Vec<TruthRun<f64>>,
    pub kalman: Vec<Vec<KalmanBelief<f64>>>,
}

impl LinearTestSet {
    pub fn new(spec: Arc<SystemSpec<f64>>, count: usize, steps: usize, seed: u64) -> Result<Self> {
        let truths = generate_dataset(&spec, count, steps, seed.wrapping_add(TEST_STREAM_OFFSET), DatasetMode::PerTrajectory)?;
        let kalman = truths.iter().map(|t| kalman_track(&spec, t)).collect::<Result<Vec<_>>>()?;
        Ok(Self { spec, truths, kalman })
    }

    /// Mean over trajectories of the time-averaged sampling-baseline `W_2`.
    pub fn baseline(&self, members: usize, seed: u64) -> Result<f64> {
        let v = self
            .kalman
            .par_iter()
            .enumerate()
            .map(|(m, k)| sampling_baseline(k, members, &mut RngStream::derived(seed, &[BASELINE_TAG, m as u64])))
            .collect::<Result<Vec<f64>>>()?;
        Ok(mean(&v))
    }

    /// Mean time-averaged `W_2` of the learned filter; NaN if any run diverged.
    pub fn mnmef_w2(&self, model: &Mnmef<f64>, members: usize, seed: u64, opts: StepOptions) -> Result<f64> {
        let v = self
            .truths
            .par_iter()
            .zip(&self.kalman)
            .enumerate()
            .map(|(m, (t, k))| {
                let run = model.run(t, m, members, seed, opts, true)?;
                match (&run.failure, &run.ensembles) {
                    (None, Some(e)) => ensemble_w2(e, k),
                    _ => Ok(f64::NAN),
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(mean(&v))
    }
}

/// Row of the linear-experiment curve CSV.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurveRow {
    pub setting: String,
    pub epoch: usize,
    pub w2: f64,
    pub baseline_w2: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearOutcome {
    pub rows: Vec<CurveRow>,
    pub baseline_w2: f64,
    /// Settings whose training diverged, with the epoch.
    pub diverged: Vec<(LinearSetting, usize)>,
}

/// Trains the learned filter under each setting and records the test `W_2`
/// after every epoch (epoch 0 is the untrained filter).
pub fn linear_experiment(cfg: &LinearExperimentConfig) -> Result<LinearOutcome> {
    let spec = Arc::new(linear_system(cfg.dim, cfg.sigma_y, cfg.sigma_v)?);
    let tc = &cfg.train;
    let data = generate_dataset(&spec, cfg.train_trajectories, cfg.train_steps, tc.seed, DatasetMode::PerTrajectory)?;
    let test = LinearTestSet::new(spec.clone(), cfg.test_trajectories, cfg.test_steps, tc.seed)?;
    let baseline_w2 = test.baseline(tc.members, tc.seed)?;
    let mut rows = Vec::new();
    let mut diverged = Vec::new();
    for &setting in &cfg.settings {
        let mut model = Mnmef::new(spec.clone(), MnmefConfig::for_system(&spec), tc.seed)?;
        let run_cfg = TrainConfig {
            loss: setting.loss(),
            weight_decay: if setting.decays() { cfg.weight_decay } else { 0.0 },
            ..tc.clone()
        };
        let mut curve = Vec::new();
        let result = train(&mut model, &data, &run_cfg, |rec, m| {
            let w2 = test.mnmef_w2(m, tc.members, tc.seed, StepOptions::default())?;
            curve.push(CurveRow { setting: setting.to_string(), epoch: rec.epoch, w2, baseline_w2 });
            Ok(())
        });
        match result {
            Ok(_) => {}
            Err(Error::Divergence { epoch }) => {
                curve.push(CurveRow { setting: setting.to_string(), epoch, w2: f64::NAN, baseline_w2 });
                diverged.push((setting, epoch));
            }
            Err(e) => return Err(e),
        }
        rows.extend(curve);
    }
    Ok(LinearOutcome { rows, baseline_w2, diverged })
}

/// Curve CSV: `setting,epoch,w2,baseline_w2`.
pub fn write_curve(path: &std::path::Path, rows: &[CurveRow]) -> Result<()> {
    write_csv(path, rows)
}
