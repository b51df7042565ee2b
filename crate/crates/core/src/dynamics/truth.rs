use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::system::SystemSpec;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Real, RngStream};

/// Stream tag for the single-long-trajectory generator.
const LONG_RUN_STREAM: u64 = u64::MAX;

/// One truth trajectory `v_0..v_J` and its observations `y_1..y_J`.
#[derive(Clone, Debug, PartialEq)]
pub struct TruthRun<T: Real = f64> {
    /// `(J + 1) x d_v`, row `j` is `v_j`.
    pub states: Matrix<T>,
    /// `J x d_y`, row `j - 1` is `y_j`.
    pub obs: Matrix<T>,
    pub seed: u64,
    pub stream: u64,
}

impl<T: Real> TruthRun<T> {
    pub fn steps(&self) -> usize {
        self.obs.rows()
    }

    pub fn state(&self, j: usize) -> &[T] {
        self.states.row(j)
    }

    /// Observation `y_j` for `j` in `1..=J`.
    pub fn observation(&self, j: usize) -> &[T] {
        self.obs.row(j - 1)
    }

    pub fn initial_state(&self) -> &[T] {
        self.states.row(0)
    }
}

/// How the trajectories of a dataset relate to each other.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetMode {
    /// Every trajectory burns in independently from its own base draw.
    #[default]
    PerTrajectory,
    /// Consecutive windows of one long trajectory after a single burn-in.
    SingleLong,
}

impl std::str::FromStr for DatasetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-trajectory" => Ok(DatasetMode::PerTrajectory),
            "single-long" => Ok(DatasetMode::SingleLong),
            other => Err(Error::InvalidConfig(format!("unknown dataset mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for DatasetMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DatasetMode::PerTrajectory => "per-trajectory",
            DatasetMode::SingleLong => "single-long",
        })
    }
}

/// Runs `steps` noise-free model steps.
pub fn burn_in<T: Real>(spec: &SystemSpec<T>, v: &[T], steps: u64) -> Result<Vec<T>> {
    let mut x = v.to_vec();
    for _ in 0..steps {
        x = spec.step(&x)?;
    }
    Ok(x)
}

/// Emits `J` noisy steps from a given initial state. With zero noise the
/// result does not depend on `rng`.
pub fn generate_truth_from<T: Real>(
    spec: &SystemSpec<T>,
    v0: &[T],
    steps: usize,
    rng: &mut RngStream,
) -> Result<TruthRun<T>> {
    if steps == 0 {
        return Err(Error::InvalidConfig("trajectory length J must be at least 1".into()));
    }
    if v0.len() != spec.state_dim() {
        return Err(crate::error::dim_mismatch(format!(
            "initial state of length {} for state dimension {}",
            v0.len(),
            spec.state_dim()
        )));
    }
    let (d_v, d_y) = (spec.state_dim(), spec.obs_dim());
    let mut states = Matrix::zeros(steps + 1, d_v);
    let mut obs = Matrix::zeros(steps, d_y);
    states.row_mut(0).copy_from_slice(v0);
    let zero_v = vec![T::zero(); d_v];
    let zero_y = vec![T::zero(); d_y];
    for j in 1..=steps {
        let drift = spec.step(states.row(j - 1))?;
        let xi = crate::numerics::sample_gaussian(rng, &zero_v, spec.process_factor())?;
        let next: Vec<T> = drift.iter().zip(&xi).map(|(&a, &b)| a + b).collect();
        let eta = crate::numerics::sample_gaussian(rng, &zero_y, spec.obs_factor())?;
        let y: Vec<T> = spec.observe(&next).iter().zip(&eta).map(|(&a, &b)| a + b).collect();
        if !crate::numerics::all_finite(&next) || !crate::numerics::all_finite(&y) {
            return Err(Error::NonFinite("generate_truth"));
        }
        states.row_mut(j).copy_from_slice(&next);
        obs.row_mut(j - 1).copy_from_slice(&y);
    }
    Ok(TruthRun { states, obs, seed: rng.seed(), stream: rng.stream_id() })
}

/// Draws a base state, burns in, then emits `J` noisy steps.
pub fn generate_truth<T: Real>(spec: &SystemSpec<T>, steps: usize, rng: &mut RngStream) -> Result<TruthRun<T>> {
    let base = spec.sample_base(rng);
    let n = spec.burn_in.draw(rng);
    let v0 = burn_in(spec, &base, n)?;
    generate_truth_from(spec, &v0, steps, rng)
}

/// Generates `count` trajectories of length `steps`. Trajectory `m` owns the
/// stream `(seed, m)`, so the result is independent of the thread schedule.
pub fn generate_dataset<T: Real>(
    spec: &SystemSpec<T>,
    count: usize,
    steps: usize,
    seed: u64,
    mode: DatasetMode,
) -> Result<Vec<TruthRun<T>>> {
    match mode {
        DatasetMode::PerTrajectory => (0..count)
            .into_par_iter()
            .map(|m| generate_truth(spec, steps, &mut RngStream::new(seed, m as u64)))
            .collect(),
        DatasetMode::SingleLong => {
            let mut rng = RngStream::new(seed, LONG_RUN_STREAM);
            let base = spec.sample_base(&mut rng);
            let n = spec.burn_in.draw(&mut rng);
            let mut v0 = burn_in(spec, &base, n)?;
            let mut out = Vec::with_capacity(count);
            for m in 0..count {
                let mut seg_rng = RngStream::new(seed, m as u64);
                let run = generate_truth_from(spec, &v0, steps, &mut seg_rng)?;
                v0 = run.states.row(steps).to_vec();
                out.push(run);
            }
            Ok(out)
        }
    }
}
