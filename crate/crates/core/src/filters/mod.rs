//! Classical ensemble filters and the exact Kalman filter.

pub mod enkf;
pub mod ensemble;
pub mod etkf;
pub mod ienkf;
pub mod kalman;
pub mod localization;
pub mod run;

pub use enkf::{enkf_analysis, enkf_covariances, enkf_gain_transposed, LocalizationMasks};
pub use ensemble::{
    anomalies, apply_inflation, cross_covariance, ensemble_mean, initial_ensemble, observe_ensemble, permute_rows,
    predict, StateEnsemble, StepNoise,
};
pub use etkf::{esrf_analysis, letkf_analysis, transform_weights};
pub use ienkf::{ienkf_analysis, IenkfConfig, IenkfOutcome};
pub use kalman::{kalman_predict, kalman_step, kalman_update, KalmanBelief};
pub use localization::{default_radius_scale, gaspari_cohn, LocalizationSpec};
pub use run::{is_divergence, run_assimilation, run_classic, run_stream, ClassicConfig, FilterMethod, RunRecord};
