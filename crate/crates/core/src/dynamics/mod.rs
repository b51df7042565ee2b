//! Dynamical systems, observation operators and truth-trajectory generation.

pub mod differentiable;
pub mod ks;
pub mod lorenz;
pub mod store;
pub mod system;
pub mod truth;

pub use differentiable::{propagate, step_on_tape};
pub use ks::{ks_base_profile, KsSolver};
pub use lorenz::{lorenz63_rhs, lorenz96_rhs, lorenz96_rhs_into, rk4_integrate, rk4_step};
pub use store::{load_dataset, save_dataset, Manifest};
pub use system::{
    rotation_blocks, subsample_obs, BaseState, BurnIn, IndexMetric, Model, ObsOperator, SystemName, SystemSpec,
    DEFAULT_ROTATION_ANGLES,
};
pub use truth::{burn_in, generate_dataset, generate_truth, generate_truth_from, DatasetMode, TruthRun};
