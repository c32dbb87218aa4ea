//! Past-quantum-state retrodiction of a QND-probed Gaussian spin oscillator.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod estimator;
pub mod experiment;
pub mod gaussian;
pub mod grid_oracle;
pub mod past_state;
pub mod pipeline;
pub mod qnd;

pub use error::{Error, Result};
