use std::fmt;
use std::str::FromStr;

use crate::dynamics::TruthRun;
use crate::error::{dim_mismatch, Error, Result};
use crate::numerics::{to_f64, Matrix, Real};

/// Truth norms below this switch that step to the unnormalized error.
pub const DEGENERATE_NORM: f64 = 1e-8;

/// Per-step error normalization of the trajectory loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LossKind {
    /// `|m_j - v_j|^2 / |v_j|^2`.
    #[default]
    Relative,
    /// `|m_j - v_j|^2`.
    Unnormalized,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Relative => "relative",
            LossKind::Unnormalized => "unnormalized",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relative" | "nl2" => Ok(LossKind::Relative),
            "unnormalized" | "l2" => Ok(LossKind::Unnormalized),
            other => Err(Error::InvalidConfig(format!("unknown loss `{other}`"))),
        }
    }
}

/// Weight of step `j` (`1..=J`) in the trajectory loss: `1 / (J |v_j|^2)`,
/// or `1 / J` when unnormalized or when `|v_j| < DEGENERATE_NORM`.
pub fn step_weights<T: Real>(truth: &TruthRun<T>, kind: LossKind) -> Vec<f64> {
    let j_total = truth.steps() as f64;
    (1..=truth.steps())
        .map(|j| {
            let norm2: f64 = truth.state(j).iter().map(|&x| to_f64(x).powi(2)).sum();
            match kind {
                LossKind::Relative if norm2.sqrt() >= DEGENERATE_NORM => 1.0 / (j_total * norm2),
                _ => 1.0 / j_total,
            }
        })
        .collect()
}

/// Steps whose truth norm is below [`DEGENERATE_NORM`].
pub fn degenerate_steps<T: Real>(truth: &TruthRun<T>) -> Vec<usize> {
    (1..=truth.steps())
        .filter(|&j| truth.state(j).iter().map(|&x| to_f64(x).powi(2)).sum::<f64>().sqrt() < DEGENERATE_NORM)
        .collect()
}

/// Relative squared error averaged over steps `1..=J`; `means` row `j` is the
/// ensemble mean at step `j` (row 0, the initial ensemble, is ignored).
pub fn trajectory_loss<T: Real>(means: &Matrix<T>, truth: &TruthRun<T>, kind: LossKind) -> Result<f64> {
    if means.rows() != truth.steps() + 1 || means.cols() != truth.states.cols() {
        return Err(dim_mismatch("trajectory loss: means must be (J + 1) x d_v"));
    }
    let w = step_weights(truth, kind);
    Ok((1..=truth.steps()).map(|j| w[j - 1] * sq_dist(means.row(j), truth.state(j))).sum())
}

/// Mean of the trajectory losses.
pub fn batch_loss(losses: &[f64]) -> f64 {
    losses.iter().sum::<f64>() / losses.len() as f64
}

pub(crate) fn sq_dist<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| to_f64(x - y).powi(2)).sum()
}
