//! Metrics, baseline tuning and the linear-Gaussian experiment.

pub mod harness;
pub mod linear;
pub mod metrics;

pub use harness::{
    evaluate_classic, evaluate_mnmef, grid_search, metric_rows, report, summary_row, write_heatmap, write_metrics,
    write_summary, GridCell, GridResult, MetricRow, SummaryRow,
};
pub use linear::{
    ensemble_w2, kalman_track, linear_experiment, linear_system, sampling_baseline, write_curve, CurveRow,
    LinearExperimentConfig, LinearOutcome, LinearSetting, LinearTestSet,
};
pub use metrics::{mean, r_rmse, relative_improvement, std_dev, w2_gaussian, MetricReport};

#[cfg(test)]
mod tests;
