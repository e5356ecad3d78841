//! Weighting estimators for causal effects in clustered data with interference
//! restricted to each cluster.

pub mod data;
pub mod diagnostics;
pub mod estimators;
pub mod inference;
pub mod io;
pub mod error;
pub mod numerics;
pub mod simulate;
pub mod stats;
pub mod structures;

pub use data::DEFAULT_PATTERN_CAP;
pub use error::{Error, Result};
