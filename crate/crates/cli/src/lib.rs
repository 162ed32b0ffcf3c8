//! Command implementations behind the `quanv` binary: appendix validation,
//! feature precomputation, multi-replica training and dataset utilities.

pub mod commands;
pub mod config;
pub mod error;

pub use config::{DatasetSource, ExperimentConfig, ModelKind};
pub use error::{CliError, CliResult};
