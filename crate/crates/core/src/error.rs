use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not symmetric positive-definite (non-positive pivot at {pivot})")]
    NotSpd { pivot: usize },
    #[error("symmetric eigensolver did not converge within {sweeps} sweeps")]
    EigFailure { sweeps: usize },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("truth trajectory has (near) zero norm at step {step}")]
    DegenerateTruth { step: usize },
    #[error("division by zero in {0}")]
    DivideByZero(&'static str),
    #[error("backward requires a scalar loss, got shape {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Divergence { epoch: usize },
    #[error("every grid cell diverged")]
    AllDiverged,
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_mismatch(msg: impl Into<String>) -> Error {
    Error::DimMismatch(msg.into())
}
