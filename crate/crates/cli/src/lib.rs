//! Command-line driver: configuration files, calibration, runs and sweeps.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;
pub mod summary;

pub use config::{Overrides, RunConfigFile};
pub use error::{CliError, Result};
