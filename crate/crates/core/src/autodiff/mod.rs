//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Every quantity is a 2-D matrix; scalars are 1x1. A [`Tape`] records
//! operations as they are evaluated and [`Tape::backward`] returns gradients
//! of a 1x1 result with respect to every `param` leaf.

mod gradcheck;
mod tape;

pub use gradcheck::{check_gradient, gradient_errors, primitive_cases, primitive_suite, relative_error, FD_STEP};
pub use tape::{Gradients, Tape, Var, Vjp, LAYER_NORM_EPS};
