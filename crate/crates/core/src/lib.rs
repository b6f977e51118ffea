// Negated comparisons are used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod cli;
pub mod datasets;
pub mod error;
pub mod forward;
pub mod grid;
pub mod guidance;
pub mod metrics;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod score;

pub use error::{Error, Result};
pub use grid::SignalGrid;
