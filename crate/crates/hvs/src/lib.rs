//! File formats, experiment harness and command-line front end for
//! `hvs-core`.
//!
//! - [`checkpoint`]: the `HVSC` named-tensor format for models, classifiers
//!   and supernets.
//! - [`dataset`]: the `HVSD` labeled-dataset format and JSON split files.
//! - [`harness`]: method comparison, correlation study, reward ablation and
//!   CSV/JSON result emission.

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod harness;

pub use error::{HvsError, Result};

/// Version string printed by `hvs --version`.
pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (checkpoint format v1, dataset format v1)");
