//! The learned ensemble filter: a set-transformer encoding of the forecast
//! ensemble conditions perceptron heads that correct the gain, localize it by
//! distance and inflate the analysis.

mod batch;
mod checkpoint;
mod gradcheck;
mod model;
mod params;
mod table;

pub use checkpoint::{load_checkpoint, read_checkpoint_header, save_checkpoint, sidecar_path, CheckpointHeader};
pub use gradcheck::partition_gradient_errors;
pub use model::{gain_transposed_on_tape, learned_gain, BoundedMode, Mnmef, MnmefConfig, StepOptions};
pub use params::{Bound, ParamStore, Partition};
pub use table::DistanceTable;

#[cfg(test)]
mod tests;
