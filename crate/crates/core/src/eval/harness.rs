use std::cmp::Ordering;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use super::metrics::{mean, MetricReport};
use crate::dynamics::{SystemSpec, TruthRun};
use crate::error::{Error, Result};
use crate::filters::{run_classic, ClassicConfig, FilterMethod, RunRecord};
use crate::mnmef::{Mnmef, StepOptions};

/// Runs a classical filter over every trajectory, in parallel.
pub fn evaluate_classic(
    spec: &SystemSpec<f64>,
    truths: &[TruthRun<f64>],
    cfg: &ClassicConfig,
    seed: u64,
) -> Result<Vec<RunRecord<f64>>> {
    truths.par_iter().enumerate().map(|(m, t)| run_classic(spec, t, m, cfg, seed, false)).collect()
}

/// Runs the learned filter over every trajectory; trajectories are stacked
/// `group` at a time and groups run in parallel.
pub fn evaluate_mnmef(
    model: &Mnmef<f64>,
    truths: &[TruthRun<f64>],
    members: usize,
    seed: u64,
    opts: StepOptions,
    group: usize,
) -> Result<Vec<RunRecord<f64>>> {
    let ids: Vec<usize> = (0..truths.len()).collect();
    let parts: Vec<Result<Vec<RunRecord<f64>>>> = ids
        .par_chunks(group.max(1))
        .map(|chunk| {
            let refs: Vec<&TruthRun<f64>> = chunk.iter().map(|&m| &truths[m]).collect();
            model.run_batch(&refs, chunk, members, seed, opts, false)
        })
        .collect();
    let mut out = Vec::with_capacity(truths.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// R-RMSE of every run against its truth.
pub fn report(method: &str, members: usize, sigma_y: f64, runs: &[RunRecord<f64>], truths: &[TruthRun<f64>]) -> MetricReport {
    MetricReport {
        method: method.to_string(),
        members,
        sigma_y,
        values: runs.iter().zip(truths).map(|(r, t)| r.r_rmse(t)).collect(),
    }
}

/// One grid cell; `mean` is NaN when any trajectory diverged.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridCell {
    pub alpha: f64,
    pub radius: Option<f64>,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridResult {
    /// Cells in `alpha`-major order.
    pub cells: Vec<GridCell>,
    pub best: GridCell,
}

/// Ordering by mean error, then smaller `alpha`, then smaller radius (no
/// localization counts as an infinite radius).
pub(crate) fn cell_order(a: &GridCell, b: &GridCell) -> Ordering {
    let r = |c: &GridCell| c.radius.unwrap_or(f64::INFINITY);
    a.mean.total_cmp(&b.mean).then(a.alpha.total_cmp(&b.alpha)).then(r(a).total_cmp(&r(b)))
}

/// Mean R-RMSE of a classical filter for every `(alpha, radius)` pair and
/// the best finite cell.
pub fn grid_search(
    spec: &SystemSpec<f64>,
    truths: &[TruthRun<f64>],
    method: FilterMethod,
    members: usize,
    alphas: &[f64],
    radii: &[Option<f64>],
    seed: u64,
) -> Result<GridResult> {
    if alphas.is_empty() || radii.is_empty() {
        return Err(Error::InvalidConfig("grid search needs nonempty alpha and radius grids".into()));
    }
    let pairs: Vec<(f64, Option<f64>)> = alphas.iter().flat_map(|&a| radii.iter().map(move |&r| (a, r))).collect();
    let cells = pairs
        .par_iter()
        .map(|&(alpha, radius)| {
            let cfg = ClassicConfig::new(method, members).with_alpha(alpha).with_radius(radius);
            let runs = evaluate_classic(spec, truths, &cfg, seed)?;
            let values: Vec<f64> = runs.iter().zip(truths).map(|(r, t)| r.r_rmse(t)).collect();
            Ok(GridCell { alpha, radius, mean: mean(&values) })
        })
        .collect::<Result<Vec<_>>>()?;
    let best = cells.iter().filter(|c| c.mean.is_finite()).min_by(|a, b| cell_order(a, b)).copied();
    let best = best.ok_or(Error::AllDiverged)?;
    Ok(GridResult { cells, best })
}

#[derive(Serialize)]
struct HeatmapRow {
    alpha: f64,
    radius: String,
    mean_r_rmse: f64,
}

fn radius_text(r: Option<f64>) -> String {
    r.map_or_else(|| "none".to_string(), |x| x.to_string())
}

fn write_rows<R: Serialize>(path: &Path, rows: impl IntoIterator<Item = R>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
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

/// Heatmap CSV: `alpha,radius,mean_r_rmse`, one row per cell.
pub fn write_heatmap(path: &Path, grid: &GridResult) -> Result<()> {
    write_rows(
        path,
        grid.cells.iter().map(|c| HeatmapRow { alpha: c.alpha, radius: radius_text(c.radius), mean_r_rmse: c.mean }),
    )
}

/// Row of the per-trajectory metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub method: String,
    pub system: String,
    #[serde(rename = "N")]
    pub members: usize,
    pub sigma_y: f64,
    pub seed: u64,
    #[serde(rename = "trajectory_id")]
    pub trajectory: usize,
    pub r_rmse: f64,
}

/// Row of the summary CSV.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub method: String,
    pub system: String,
    #[serde(rename = "N")]
    pub members: usize,
    pub sigma_y: f64,
    pub mean: f64,
    pub std: f64,
}

/// Per-trajectory rows of a report.
pub fn metric_rows(report: &MetricReport, system: &str, seed: u64) -> Vec<MetricRow> {
    report
        .values
        .iter()
        .enumerate()
        .map(|(m, &v)| MetricRow {
            method: report.method.clone(),
            system: system.to_string(),
            members: report.members,
            sigma_y: report.sigma_y,
            seed,
            trajectory: m,
            r_rmse: v,
        })
        .collect()
}

pub fn summary_row(report: &MetricReport, system: &str) -> SummaryRow {
    SummaryRow {
        method: report.method.clone(),
        system: system.to_string(),
        members: report.members,
        sigma_y: report.sigma_y,
        mean: report.mean(),
        std: report.std(),
    }
}

/// Metrics CSV: `method,system,N,sigma_y,seed,trajectory_id,r_rmse`.
pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    write_rows(path, rows)
}

/// Summary CSV: `method,system,N,sigma_y,mean,std`.
pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    write_rows(path, rows)
}

pub(crate) fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    write_rows(path, rows)
}
