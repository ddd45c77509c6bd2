//! Reduced-order emulation of transient gas pressure on a pipeline wall.
//!
//! The crate generates snapshot data with a 1-D isothermal pipe-flow solver,
//! compresses it with proper orthogonal decomposition, fits polynomial latent
//! dynamics by Operator Inference and benchmarks blocked autoregressive
//! rollouts against classical forecasting baselines.

// `!(x > 0.0)` deliberately rejects NaN alongside non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod binio;
pub mod baselines;
pub mod bench;
pub mod config;
pub mod error;
pub mod field_data;
pub mod model;
pub mod opinf;
pub mod pod;
pub mod solver;

pub use error::{Error, Result};
