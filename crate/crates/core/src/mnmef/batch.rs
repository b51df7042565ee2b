use super::model::{Mnmef, StepOptions};
use super::params::Bound;
use crate::autodiff::Tape;
use crate::dynamics::TruthRun;
use crate::error::{dim_mismatch, Error, Result};
use crate::filters::{ensemble_mean, initial_ensemble, is_divergence, run_stream, RunRecord, StepNoise};
use crate::numerics::{Matrix, Real, RngStream};

struct Lane<T: Real> {
    rng: RngStream,
    ens: Matrix<T>,
    means: Vec<Vec<T>>,
    ensembles: Option<Vec<Matrix<T>>>,
    failure: Option<String>,
}

impl<T: Real> Mnmef<T> {
    /// Value-only step of several equally sized ensembles at once.
    pub fn analysis_batch(
        &self,
        ens: &[&Matrix<T>],
        noise: &[&StepNoise<T>],
        y: &[&[T]],
        opts: StepOptions,
    ) -> Result<Vec<Matrix<T>>> {
        let n = ens.first().map_or(0, |e| e.rows());
        if ens.iter().any(|e| e.rows() != n) {
            return Err(dim_mismatch("batched ensembles differ in size"));
        }
        let d_v = self.state_dim();
        let stacked = Matrix::from_fn(n * ens.len(), d_v, |i, j| ens[i / n][(i % n, j)]);
        let tape = Tape::new();
        let p = if opts.zero_heads { Bound { parts: Default::default() } } else { self.params.bind(&tape, false) };
        let out = self.step_batch_on_tape(&p, tape.constant(stacked), noise, y, opts)?.to_matrix();
        Ok((0..ens.len()).map(|b| Matrix::from_fn(n, d_v, |i, j| out[(b * n + i, j)])).collect())
    }

    /// Runs the filter over several trajectories of equal length, stepping
    /// the live ensembles together. Each trajectory sees exactly the draws of
    /// [`Mnmef::run`]; a diverged trajectory stops and is recorded as such.
    pub fn run_batch(
        &self,
        truths: &[&TruthRun<T>],
        trajectories: &[usize],
        members: usize,
        seed: u64,
        opts: StepOptions,
        keep_ensembles: bool,
    ) -> Result<Vec<RunRecord<T>>> {
        if members < 2 {
            return Err(Error::InvalidConfig("ensemble size must be at least 2".into()));
        }
        if truths.len() != trajectories.len() {
            return Err(dim_mismatch("one trajectory index per truth run"));
        }
        let steps = truths.first().map_or(0, |t| t.steps());
        if truths.iter().any(|t| t.steps() != steps) {
            return Err(dim_mismatch("batched truth runs differ in length"));
        }
        let c0 = Matrix::identity(self.state_dim());
        let mut lanes = truths
            .iter()
            .zip(trajectories)
            .map(|(t, &m)| {
                let mut rng = run_stream(seed, m);
                let ens = initial_ensemble(t.initial_state(), members, &c0, &mut rng)?;
                let means = vec![ensemble_mean(&ens)];
                let ensembles = keep_ensembles.then(|| vec![ens.clone()]);
                Ok(Lane { rng, ens, means, ensembles, failure: None })
            })
            .collect::<Result<Vec<_>>>()?;
        for j in 1..=steps {
            let live: Vec<usize> = (0..lanes.len()).filter(|&b| lanes[b].failure.is_none()).collect();
            if live.is_empty() {
                break;
            }
            let mut noise = Vec::with_capacity(live.len());
            for &b in &live {
                noise.push(StepNoise::draw(&self.spec, members, &mut lanes[b].rng)?);
            }
            let ens: Vec<&Matrix<T>> = live.iter().map(|&b| &lanes[b].ens).collect();
            let nref: Vec<&StepNoise<T>> = noise.iter().collect();
            let ys: Vec<&[T]> = live.iter().map(|&b| truths[b].observation(j)).collect();
            let outs: Vec<Result<Matrix<T>>> = match self.analysis_batch(&ens, &nref, &ys, opts) {
                Ok(v) => v.into_iter().map(Ok).collect(),
                // isolate the ensembles that broke down
                Err(e) if is_divergence(&e) => (0..live.len())
                    .map(|k| Ok(self.analysis_batch(&ens[k..k + 1], &nref[k..k + 1], &ys[k..k + 1], opts)?.remove(0)))
                    .collect(),
                Err(e) => return Err(e),
            };
            for (&b, out) in live.iter().zip(outs) {
                let lane = &mut lanes[b];
                match out {
                    Ok(next) if next.is_finite() => lane.ens = next,
                    Ok(_) => {
                        lane.failure = Some(format!("non-finite ensemble at step {j}"));
                        continue;
                    }
                    Err(e) if is_divergence(&e) => {
                        lane.failure = Some(format!("step {j}: {e}"));
                        continue;
                    }
                    Err(e) => return Err(e),
                }
                lane.means.push(ensemble_mean(&lane.ens));
                if let Some(v) = lane.ensembles.as_mut() {
                    v.push(lane.ens.clone());
                }
            }
        }
        let d_v = self.state_dim();
        lanes
            .into_iter()
            .zip(trajectories)
            .map(|(lane, &m)| {
                let rows = lane.means.len();
                let means = Matrix::from_vec(rows, d_v, lane.means.into_iter().flatten().collect())?;
                Ok(RunRecord {
                    method: "mnmef".into(),
                    trajectory: m,
                    members,
                    means,
                    ensembles: lane.ensembles,
                    failure: lane.failure,
                })
            })
            .collect()
    }
}
