//! Ensemble data assimilation: classical ensemble Kalman filters and a learned
//! ensemble filter whose gain, inflation and localization are produced by
//! networks conditioned on a permutation-invariant encoding of the ensemble.
//!
//! Numerical code is generic over [`Real`] (`f32` or `f64`); the aliases below
//! fix the scalar to `f64`, which is what the training and evaluation
//! pipelines use.

pub mod autodiff;
pub mod dynamics;
pub mod error;
pub mod eval;
pub mod filters;
pub mod mnmef;
pub mod numerics;
pub mod settransformer;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use numerics::{lit, Real};

pub type Matrix64 = numerics::Matrix<f64>;
