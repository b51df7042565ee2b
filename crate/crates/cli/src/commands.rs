use std::fs;
use std::path::Path;
use std::sync::Arc;

use ensfilter::dynamics::{generate_dataset, load_dataset, save_dataset, BurnIn, DatasetMode, Manifest, SystemName, SystemSpec, TruthRun};
use ensfilter::eval::{
    evaluate_classic, evaluate_mnmef, grid_search as run_grid, linear_experiment, metric_rows, r_rmse, report, summary_row,
    write_curve, write_heatmap, write_metrics, write_summary, LinearExperimentConfig, LinearSetting, MetricReport,
};
use ensfilter::filters::{ClassicConfig, FilterMethod, RunRecord};
use ensfilter::mnmef::{load_checkpoint, Mnmef, MnmefConfig, StepOptions};
use ensfilter::numerics::Matrix;
use ensfilter::training::{self, EpochWriter, LossKind, TrainConfig};
use ensfilter::verify::quick_suite;
use ensfilter::{Error, Result};

use crate::settings::Settings;

/// Result of a command that ran to completion.
pub enum Outcome {
    Success,
    /// Outputs were written but some runs diverged.
    Diverged(String),
    /// `verify` found failing checks.
    ChecksFailed(usize),
}

pub const GEN_DATA_DEFAULTS: &[(&str, &str)] = &[
    ("system", "lorenz63"),
    ("traj", "16"),
    ("len", "100"),
    ("seed", "0"),
    ("sigma_y", "1.0"),
    ("sigma_v", "0.0"),
    ("burn_in", "10000"),
    ("dataset_mode", "per-trajectory"),
    ("out", "data"),
    ("workers", "auto"),
];


pub const PRETRAIN_DEFAULTS: &[(&str, &str)] = &[
    ("data", ""),
    ("out", "pretrain"),
    ("checkpoint", ""),
    ("members", "10"),
    ("epochs", "50"),
    ("lr", "0.001"),
    ("weight_decay", "0.0"),
    ("batch", "32"),
    ("group", "8"),
    ("detach", "5"),
    ("loss", "relative"),
    ("activation", "relu"),
    ("bounded", "logistic"),
    ("hidden", "128"),
    ("seed", "0"),
    ("workers", "auto"),
];

pub const FINETUNE_DEFAULTS: &[(&str, &str)] = &[
    ("data", ""),
    ("out", "finetune"),
    ("checkpoint", ""),
    ("members", "40"),
    ("epochs", "20"),
    ("lr", "0.001"),
    ("weight_decay", "0.0"),
    ("batch", "32"),
    ("group", "8"),
    ("detach", "5"),
    ("loss", "relative"),
    ("seed", "0"),
    ("workers", "auto"),
];

pub const RUN_FILTER_DEFAULTS: &[(&str, &str)] = &[
    ("method", "enkf"),
    ("data", ""),
    ("out", "run"),
    ("checkpoint", ""),
    ("members", "10"),
    ("alpha", "1.0"),
    ("radius", "none"),
    ("seed", "0"),
    ("group", "8"),
    ("zero_heads", "false"),
    ("zero_inflation", "false"),
    ("workers", "auto"),
];

pub const GRID_DEFAULTS: &[(&str, &str)] = &[
    ("method", "letkf"),
    ("data", ""),
    ("out", "grid"),
    ("members", "10"),
    ("alphas", "1.0,1.05,1.1,1.15,1.2"),
    ("radii", "1,2,3,4"),
    ("seed", "0"),
    ("workers", "auto"),
];

pub const EVALUATE_DEFAULTS: &[(&str, &str)] = &[
    ("data", ""),
    ("estimates", ""),
    ("out", "evaluate"),
    ("label", "estimate"),
    ("members", "0"),
    ("seed", "0"),
    ("workers", "auto"),
];

pub const LINEAR_DEFAULTS: &[(&str, &str)] = &[
    ("out", "linear"),
    ("dim", "10"),
    ("sigma_y", "1.0"),
    ("sigma_v", "0.01"),
    ("train_traj", "64"),
    ("train_len", "30"),
    ("test_traj", "16"),
    ("test_len", "100"),
    ("members", "10"),
    ("epochs", "10"),
    ("lr", "0.001"),
    ("weight_decay", "0.01"),
    ("batch", "32"),
    ("group", "8"),
    ("detach", "5"),
    ("settings", "NL2(WD),NL2,L2(WD),L2"),
    ("seed", "0"),
    ("workers", "auto"),
];

pub const VERIFY_DEFAULTS: &[(&str, &str)] = &[("seed", "0"), ("out", ""), ("workers", "auto")];

fn config_err(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}

fn burn_in(s: &Settings) -> Result<BurnIn> {
    match s.raw("burn_in")? {
        "full" => Ok(BurnIn::FULL),
        _ => Ok(BurnIn::Fixed(s.get("burn_in")?)),
    }
}

fn load(s: &Settings) -> Result<(Arc<SystemSpec<f64>>, Vec<TruthRun<f64>>)> {
    let (manifest, data): (Manifest, Vec<TruthRun<f64>>) = load_dataset(&s.path("data")?)?;
    if data.is_empty() {
        return Err(Error::Format("dataset has no trajectories".into()));
    }
    Ok((Arc::new(manifest.system_spec()?), data))
}

fn train_config(s: &Settings) -> Result<TrainConfig> {
    let cfg = TrainConfig {
        members: s.get("members")?,
        epochs: s.get("epochs")?,
        batch_size: s.get("batch")?,
        group_size: s.get("group")?,
        lr: s.get("lr")?,
        weight_decay: s.get("weight_decay")?,
        detach: s.get("detach")?,
        loss: s.get::<LossKind>("loss")?,
        seed: s.get("seed")?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn log_epoch(writer: &EpochWriter, rec: &training::EpochRecord, model: &Mnmef<f64>) -> Result<()> {
    eprintln!("epoch {:>4}  loss {:.6e}  {:.1}s", rec.epoch, rec.train_loss, rec.wall_seconds);
    writer.record(rec, model)
}

pub fn gen_data(s: &Settings) -> Result<Outcome> {
    let system: SystemName = s.get("system")?;
    let spec = SystemSpec::<f64>::preset(system, s.get("sigma_y")?, s.get("sigma_v")?)?.with_burn_in(burn_in(s)?);
    let (count, steps, seed): (usize, usize, u64) = (s.get("traj")?, s.get("len")?, s.get("seed")?);
    let mode: DatasetMode = s.get("dataset_mode")?;
    if count == 0 || steps == 0 {
        return Err(config_err("trajectory count and length must be positive"));
    }
    let runs = generate_dataset(&spec, count, steps, seed, mode)?;
    let out = s.path("out")?;
    save_dataset(&out, &Manifest::for_dataset(&spec, count, steps, seed, mode), &runs, spec.dt)?;
    s.write_snapshot(&out)?;
    eprintln!("wrote {count} trajectories of {steps} steps to {}", out.display());
    Ok(Outcome::Success)
}

pub fn pretrain(s: &Settings) -> Result<Outcome> {
    let (spec, data) = load(s)?;
    let cfg = train_config(s)?;
    let mcfg = MnmefConfig {
        activation: s.get("activation")?,
        bounded: s.get("bounded")?,
        hidden: s.get("hidden")?,
        detach: cfg.detach,
        ..MnmefConfig::for_system(&spec)
    };
    let mut model = Mnmef::new(spec, mcfg, cfg.seed)?;
    let out = s.path("out")?;
    s.write_snapshot(&out)?;
    let writer = EpochWriter::create(&out)?;
    training::pretrain(&mut model, &data, &cfg, |r, m| log_epoch(&writer, r, m))?;
    eprintln!("checkpoint: {}", writer.checkpoint.display());
    Ok(Outcome::Success)
}

/// `lr` is the pretraining rate; fine-tuning runs at a tenth of it on the
/// first half of the data with the encoder frozen.
pub fn finetune(s: &Settings) -> Result<Outcome> {
    let (spec, data) = load(s)?;
    let base = train_config(s)?;
    let cfg = base.for_finetune(base.members, base.epochs);
    let mut model = load_checkpoint(&s.path("checkpoint")?, spec)?;
    let out = s.path("out")?;
    s.write_snapshot(&out)?;
    let writer = EpochWriter::create(&out)?;
    training::finetune(&mut model, &data, &cfg, |r, m| log_epoch(&writer, r, m))?;
    eprintln!("checkpoint: {}", writer.checkpoint.display());
    Ok(Outcome::Success)
}

fn write_means(path: &Path, runs: &[RunRecord<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let d = runs.first().map_or(0, |r| r.means.cols());
    let mut header = vec!["trajectory_id".to_string(), "step".to_string()];
    header.extend((0..d).map(|k| format!("x{k}")));
    w.write_record(&header).map_err(csv_err)?;
    for r in runs {
        for j in 0..r.means.rows() {
            let mut row = vec![r.trajectory.to_string(), j.to_string()];
            row.extend(r.means.row(j).iter().map(|x| x.to_string()));
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("{other:?}")),
    }
}

fn write_reports(out: &Path, system: &str, seed: u64, rep: &MetricReport) -> Result<()> {
    write_metrics(&out.join("metrics.csv"), &metric_rows(rep, system, seed))?;
    write_summary(&out.join("summary.csv"), &[summary_row(rep, system)])?;
    eprintln!("{} on {system}: mean R-RMSE {:.6} (std {:.6})", rep.method, rep.mean(), rep.std());
    Ok(())
}

pub fn run_filter(s: &Settings) -> Result<Outcome> {
    let (spec, data) = load(s)?;
    let method: FilterMethod = s.get("method")?;
    let members: usize = s.get("members")?;
    let seed: u64 = s.get("seed")?;
    let runs = if method == FilterMethod::Mnmef {
        let opts = StepOptions { zero_heads: s.flag("zero_heads")?, zero_inflation: s.flag("zero_inflation")? };
        let model = match s.raw("checkpoint")? {
            "" if opts.zero_heads => Mnmef::new(spec.clone(), MnmefConfig::for_system(&spec), seed)?,
            "" => return Err(config_err("the learned filter needs --checkpoint unless --zero-heads is set")),
            _ => load_checkpoint(&s.path("checkpoint")?, spec.clone())?,
        };
        evaluate_mnmef(&model, &data, members, seed, opts, s.get("group")?)?
    } else {
        let cfg = ClassicConfig::new(method, members).with_alpha(s.get("alpha")?).with_radius(s.optional("radius")?);
        evaluate_classic(&spec, &data, &cfg, seed)?
    };
    let out = s.path("out")?;
    s.write_snapshot(&out)?;
    write_means(&out.join("means.csv"), &runs)?;
    let rep = report(method.as_str(), members, spec.sigma_y, &runs, &data);
    write_reports(&out, spec.name.as_str(), seed, &rep)?;
    let failed: Vec<String> =
        runs.iter().filter_map(|r| r.failure.as_ref().map(|f| format!("trajectory {}: {f}", r.trajectory))).collect();
    if failed.is_empty() {
        Ok(Outcome::Success)
    } else {
        Ok(Outcome::Diverged(failed.join("; ")))
    }
}

pub fn grid_search(s: &Settings) -> Result<Outcome> {
    let (spec, data) = load(s)?;
    let method: FilterMethod = s.get("method")?;
    if method == FilterMethod::Mnmef {
        return Err(config_err("grid search tunes classical filters only"));
    }
    let alphas = s
        .list::<f64>("alphas")?
        .into_iter()
        .map(|a| a.ok_or_else(|| config_err("`none` is not a valid inflation")))
        .collect::<Result<Vec<f64>>>()?;
    let radii = s.list::<f64>("radii")?;
    let grid = run_grid(&spec, &data, method, s.get("members")?, &alphas, &radii, s.get("seed")?)?;
    let out = s.path("out")?;
    s.write_snapshot(&out)?;
    write_heatmap(&out.join("heatmap.csv"), &grid)?;
    let radius = grid.best.radius.map_or_else(|| "none".to_string(), |r| r.to_string());
    fs::write(
        out.join("best.txt"),
        format!("alpha={}\nradius={radius}\nmean_r_rmse={}\n", grid.best.alpha, grid.best.mean),
    )?;
    eprintln!("best: alpha={} radius={radius} mean R-RMSE {:.6}", grid.best.alpha, grid.best.mean);
    Ok(Outcome::Success)
}

/// Reads `trajectory_id,step,x0,...` rows into one `(J+1) x d` matrix per
/// trajectory; absent rows stay NaN.
fn read_estimates(path: &Path, data: &[TruthRun<f64>]) -> Result<Vec<Matrix<f64>>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let d = data[0].states.cols();
    if r.headers().map_err(csv_err)?.len() != d + 2 {
        return Err(Error::Format(format!("estimates need trajectory_id, step and {d} state columns")));
    }
    let mut out: Vec<Matrix<f64>> = data.iter().map(|t| Matrix::from_fn(t.steps() + 1, d, |_, _| f64::NAN)).collect();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let bad = || Error::Format(format!("estimates row {}: malformed", line + 2));
        let m: usize = rec[0].parse().map_err(|_| bad())?;
        let j: usize = rec[1].parse().map_err(|_| bad())?;
        let target = out.get_mut(m).filter(|e| j < e.rows()).ok_or_else(bad)?;
        for k in 0..d {
            target[(j, k)] = rec[k + 2].parse().map_err(|_| bad())?;
        }
    }
    Ok(out)
}

pub fn evaluate(s: &Settings) -> Result<Outcome> {
    let (spec, data) = load(s)?;
    let est = read_estimates(&s.path("estimates")?, &data)?;
    let mut values = Vec::with_capacity(data.len());
    for (e, t) in est.iter().zip(&data) {
        let j = t.steps();
        let tail = |m: &Matrix<f64>| Matrix::from_fn(j, m.cols(), |i, k| m[(i + 1, k)]);
        values.push(r_rmse(&tail(e), &tail(&t.states))?);
    }
    let rep = MetricReport { method: s.raw("label")?.to_string(), members: s.get("members")?, sigma_y: spec.sigma_y, values };
    let out = s.path("out")?;
    s.write_snapshot(&out)?;
    write_reports(&out, spec.name.as_str(), s.get("seed")?, &rep)?;
    Ok(Outcome::Success)
}

pub fn linear_exp(s: &Settings) -> Result<Outcome> {
    let settings = s
        .raw("settings")?
        .split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(str::parse)
        .collect::<Result<Vec<LinearSetting>>>()?;
    let cfg = LinearExperimentConfig {
        dim: s.get("dim")?,
        sigma_y: s.get("sigma_y")?,
        sigma_v: s.get("sigma_v")?,
        train_trajectories: s.get("train_traj")?,
        train_steps: s.get("train_len")?,
        test_trajectories: s.get("test_traj")?,
        test_steps: s.get("test_len")?,
        train: TrainConfig {
            members: s.get("members")?,
            epochs: s.get("epochs")?,
            batch_size: s.get("batch")?,
            group_size: s.get("group")?,
            lr: s.get("lr")?,
            detach: s.get("detach")?,
            seed: s.get("seed")?,
            ..TrainConfig::default()
        },
        weight_decay: s.get("weight_decay")?,
        settings,
    };
    let outcome = linear_experiment(&cfg)?;
    let out = s.path("out")?;
    s.write_snapshot(&out)?;
    write_curve(&out.join("curve.csv"), &outcome.rows)?;
    for (setting, epoch) in &outcome.diverged {
        eprintln!("{setting}: training diverged at epoch {epoch}");
    }
    eprintln!("sampling baseline W2 {:.6}", outcome.baseline_w2);
    Ok(Outcome::Success)
}

pub fn verify(s: &Settings) -> Result<Outcome> {
    let checks = quick_suite(s.get("seed")?)?;
    let mut text = String::new();
    for c in &checks {
        text.push_str(&format!("{c}\n"));
    }
    print!("{text}");
    if !s.raw("out")?.is_empty() {
        let out = s.path("out")?;
        s.write_snapshot(&out)?;
        fs::write(out.join("checks.txt"), &text)?;
    }
    match checks.iter().filter(|c| !c.passed()).count() {
        0 => Ok(Outcome::Success),
        n => Ok(Outcome::ChecksFailed(n)),
    }
}
