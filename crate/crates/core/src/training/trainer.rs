use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use super::adamw::{add_grads, zero_grads, AdamW, PartGrads};
use super::loss::{sq_dist, step_weights, LossKind};
use crate::autodiff::Tape;
use crate::dynamics::TruthRun;
use crate::error::{Error, Result};
use crate::filters::{initial_ensemble, is_divergence, StepNoise};
use crate::mnmef::{save_checkpoint, Mnmef, Partition, StepOptions};
use crate::numerics::{Matrix, RngStream};

const TRAIN_TAG: u64 = 0x5452_4149;
const SHUFFLE_TAG: u64 = 0x5348_5546;

/// Optimization settings; the trajectory count and length come from the data.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Ensemble size `N`.
    pub members: usize,
    pub epochs: usize,
    /// Trajectories per optimizer step.
    pub batch_size: usize,
    /// Trajectories stacked on one tape; fixed so results do not depend on
    /// the number of worker threads.
    pub group_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Steps per gradient window `J_0`.
    pub detach: usize,
    pub loss: LossKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            members: 10,
            epochs: 50,
            batch_size: 32,
            group_size: 8,
            lr: 1e-3,
            weight_decay: 0.0,
            detach: 5,
            loss: LossKind::Relative,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.members < 2 {
            return Err(Error::InvalidConfig("ensemble size must be at least 2".into()));
        }
        if self.batch_size == 0 || self.group_size == 0 || self.detach == 0 {
            return Err(Error::InvalidConfig("batch size, group size and detach horizon must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig("learning rate must be positive and weight decay non-negative".into()));
        }
        Ok(())
    }

    /// Fine-tuning settings derived from pretraining ones: new ensemble size,
    /// the given epoch count and a tenth of the learning rate.
    pub fn for_finetune(&self, members: usize, epochs: usize) -> Self {
        Self { members, epochs, lr: self.lr / 10.0, ..self.clone() }
    }
}

/// One row of the training log. Epoch 0 evaluates the initial parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub wall_seconds: f64,
}

/// Random stream for trajectory `m` in `epoch`: the initial ensemble and the
/// noise of every step.
pub fn training_stream(seed: u64, epoch: usize, m: usize) -> RngStream {
    RngStream::derived(seed, &[TRAIN_TAG, epoch as u64, m as u64])
}

/// Per-trajectory losses and, if `with_grad`, the gradient of
/// `weight * sum(losses)` for trajectories unrolled together on windowed
/// tapes: the ensemble entering each window of `detach` steps is carried by
/// value and detached, so the loss value does not depend on `detach`.
#[allow(clippy::too_many_arguments)]
pub fn group_gradients(
    model: &Mnmef<f64>,
    truths: &[&TruthRun<f64>],
    mut rngs: Vec<RngStream>,
    members: usize,
    detach: usize,
    kind: LossKind,
    weight: f64,
    with_grad: bool,
) -> Result<(Vec<f64>, Option<PartGrads>)> {
    let b = truths.len();
    let steps = truths.first().map_or(0, |t| t.steps());
    if b == 0 || truths.iter().any(|t| t.steps() != steps) || rngs.len() != b {
        return Err(crate::error::dim_mismatch("a group needs equally long trajectories and one stream each"));
    }
    let d_v = model.state_dim();
    let c0 = Matrix::identity(d_v);
    let mut blocks = Vec::with_capacity(b);
    for (t, rng) in truths.iter().zip(rngs.iter_mut()) {
        blocks.push(initial_ensemble(t.initial_state(), members, &c0, rng)?);
    }
    let mut state = Matrix::from_fn(b * members, d_v, |i, j| blocks[i / members][(i % members, j)]);
    let weights: Vec<Vec<f64>> = truths.iter().map(|t| step_weights(t, kind)).collect();
    let mut losses = vec![0.0; b];
    let mut grads = with_grad.then(|| zero_grads(&model.params));
    let mut start = 1;
    while start <= steps {
        let end = (start + detach - 1).min(steps);
        let tape = Tape::new();
        let p = model.params.bind(&tape, with_grad);
        let mut x = tape.constant(state);
        let mut total = None;
        for j in start..=end {
            let noise = rngs.iter_mut().map(|r| StepNoise::draw(&model.spec, members, r)).collect::<Result<Vec<_>>>()?;
            let nref: Vec<&StepNoise<f64>> = noise.iter().collect();
            let ys: Vec<&[f64]> = truths.iter().map(|t| t.observation(j)).collect();
            x = model.step_batch_on_tape(&p, x, &nref, &ys, StepOptions::default())?;
            let means = x.block_means(members)?;
            {
                let mv = means.value();
                for (k, t) in truths.iter().enumerate() {
                    losses[k] += weights[k][j - 1] * sq_dist(mv.row(k), t.state(j));
                }
            }
            if with_grad {
                let truth_rows = tape.constant(Matrix::from_fn(b, d_v, |k, c| truths[k].state(j)[c]));
                let w = tape.constant(Matrix::from_fn(b, d_v, |k, _| weight * weights[k][j - 1]));
                let diff = means.sub(truth_rows)?;
                let term = diff.mul(diff)?.mul(w)?.sum();
                total = Some(match total {
                    Some(acc) => term.add(acc)?,
                    None => term,
                });
            }
        }
        if let (Some(total), Some(acc)) = (total, grads.as_mut()) {
            let g = tape.backward(total)?;
            for part in Partition::ALL {
                for (slot, var) in acc[part.index()].iter_mut().zip(p.get(part)) {
                    if let Some(d) = g.get(*var) {
                        *slot = slot.add(d)?;
                    }
                }
            }
        }
        state = x.to_matrix();
        start = end + 1;
    }
    Ok((losses, grads))
}

/// Mean loss over `batch` and the gradient of that mean. Groups are evaluated
/// in parallel and reduced in group order.
fn batch_step(
    model: &Mnmef<f64>,
    data: &[TruthRun<f64>],
    batch: &[usize],
    epoch: usize,
    cfg: &TrainConfig,
    with_grad: bool,
) -> Result<(f64, Option<PartGrads>)> {
    let weight = 1.0 / batch.len() as f64;
    let results: Vec<Result<(Vec<f64>, Option<PartGrads>)>> = batch
        .par_chunks(cfg.group_size)
        .map(|group| {
            let truths: Vec<&TruthRun<f64>> = group.iter().map(|&m| &data[m]).collect();
            let rngs = group.iter().map(|&m| training_stream(cfg.seed, epoch, m)).collect();
            group_gradients(model, &truths, rngs, cfg.members, cfg.detach, cfg.loss, weight, with_grad)
        })
        .collect();
    let mut sum = 0.0;
    let mut grads = with_grad.then(|| zero_grads(&model.params));
    for r in results {
        let (losses, g) = r?;
        sum += losses.iter().sum::<f64>();
        if let (Some(acc), Some(g)) = (grads.as_mut(), g) {
            add_grads(acc, &g)?;
        }
    }
    Ok((sum * weight, grads))
}

fn check_data(data: &[TruthRun<f64>], model: &Mnmef<f64>) -> Result<()> {
    let steps = data.first().map_or(0, |t| t.steps());
    if data.is_empty() || steps == 0 {
        return Err(Error::InvalidConfig("training needs at least one non-empty trajectory".into()));
    }
    if data.iter().any(|t| t.steps() != steps || t.states.cols() != model.state_dim()) {
        return Err(crate::error::dim_mismatch("training trajectories must share length and state dimension"));
    }
    Ok(())
}

fn as_divergence(e: Error, epoch: usize) -> Error {
    if is_divergence(&e) {
        Error::Divergence { epoch }
    } else {
        e
    }
}

/// Mini-batch training of every partition that is not frozen. Epoch 0 is an
/// evaluation of the starting parameters; epochs `1..=E` report the mean of
/// their batch losses. `on_epoch` runs after every epoch.
pub fn train(
    model: &mut Mnmef<f64>,
    data: &[TruthRun<f64>],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &Mnmef<f64>) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    check_data(data, model)?;
    model.config.detach = cfg.detach;
    let clock = Instant::now();
    let all: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs + 1);
    let (initial, _) = batch_step(model, data, &all, 0, cfg, false).map_err(|e| as_divergence(e, 0))?;
    if !initial.is_finite() {
        return Err(Error::Divergence { epoch: 0 });
    }
    let rec = EpochRecord { epoch: 0, train_loss: initial, wall_seconds: clock.elapsed().as_secs_f64() };
    on_epoch(&rec, model)?;
    log.push(rec);
    let mut opt = AdamW::new(&model.params, cfg.lr, cfg.weight_decay);
    for epoch in 1..=cfg.epochs {
        let order = RngStream::derived(cfg.seed, &[SHUFFLE_TAG, epoch as u64]).permutation(data.len());
        let mut sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grads) = batch_step(model, data, batch, epoch, cfg, true).map_err(|e| as_divergence(e, epoch))?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            sum += loss * batch.len() as f64;
            opt.step(&mut model.params, &grads.expect("gradients requested"))?;
        }
        let rec = EpochRecord {
            epoch,
            train_loss: sum / data.len() as f64,
            wall_seconds: clock.elapsed().as_secs_f64(),
        };
        on_epoch(&rec, model)?;
        log.push(rec);
    }
    Ok(log)
}

/// Pretraining of all partitions.
pub fn pretrain(
    model: &mut Mnmef<f64>,
    data: &[TruthRun<f64>],
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord, &Mnmef<f64>) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    model.params.frozen = [false; 4];
    train(model, data, cfg, on_epoch)
}

/// Fine-tuning of the heads with the encoder frozen, on the first half of
/// `data`. `cfg` is used as given (see [`TrainConfig::for_finetune`]).
pub fn finetune(
    model: &mut Mnmef<f64>,
    data: &[TruthRun<f64>],
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord, &Mnmef<f64>) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    model.params.frozen = [false; 4];
    model.params.set_frozen(Partition::SetTransformer, true);
    let half = (data.len() / 2).max(1);
    let out = train(model, &data[..half.min(data.len())], cfg, on_epoch);
    model.params.frozen = [false; 4];
    out
}

/// Writes the latest checkpoint and appends to the CSV log after every epoch.
pub struct EpochWriter {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

impl EpochWriter {
    /// `checkpoint.bin` and `train_log.csv` in `dir`; starts a fresh log.
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let log = dir.join("train_log.csv");
        fs::write(&log, "epoch,train_loss,wall_seconds\n")?;
        Ok(Self { checkpoint: dir.join("checkpoint.bin"), log })
    }

    pub fn record(&self, rec: &EpochRecord, model: &Mnmef<f64>) -> Result<()> {
        save_checkpoint(model, &self.checkpoint)?;
        let mut f = fs::OpenOptions::new().append(true).open(&self.log)?;
        writeln!(f, "{},{:e},{:.3}", rec.epoch, rec.train_loss, rec.wall_seconds)?;
        Ok(())
    }
}
