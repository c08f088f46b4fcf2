//! Command-line front end for `dualflow-core`: run configuration,
//! checkpoints, series files and the train / score / sample / density /
//! gen-data subcommands.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod series;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use error::{exit_code, CliError};

/// Environment variable naming the default root for run directories.
pub const OUT_ENV: &str = "DUALFLOW_OUT";
