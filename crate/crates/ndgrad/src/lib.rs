//! Dense rank-4 arrays with reverse-mode differentiation.
//!
//! The operator set is deliberately small: stride-1 "same" convolution,
//! batch normalization, ReLU, residual addition, flatten, linear layers,
//! row softmax, mean-squared error, cross-entropy and a gradient-reversal
//! layer. Computations are recorded on a [`Tape`] and differentiated with
//! [`Tape::backward`]; [`gradcheck`] verifies the result numerically.

mod conv;
mod error;
pub mod gradcheck;
mod grid;
mod norm;
mod params;
mod real;
mod tape;

pub use error::{NdError, Result};
pub use grid::{Grid4, Shape4};
pub use norm::{BnMode, RunningStats, BN_EPSILON, BN_MOMENTUM};
pub use params::{Param, ParamGroup, ParamSet, ParamVars};
pub use real::Real;
pub use tape::{Tape, Var, CE_CLAMP};
