//! Generalized CP tensor decomposition with stochastic mirror descent,
//! inertial block updates and variance-reduced fiber-sampled gradients.

// NaN must fail validation, so `!(x > 0.0)` is intended throughout.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bregman;
pub mod data;
pub mod error;
pub mod estimators;
pub mod losses;
pub mod metrics;
pub mod solver;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
