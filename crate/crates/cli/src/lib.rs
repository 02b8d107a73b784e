//! Command-line harness for dataset generation, training, sampling,
//! evaluation and equivariance audits.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod plot;

pub use cli::{main_with_args, run, Cli, Command};
pub use config::{ExperimentConfig, ModelChoice};
pub use error::{CliError, Result};
