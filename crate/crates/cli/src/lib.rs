//! Command-line driver for introprior: configuration files, checkpoints,
//! metric tables, grid search and the subcommand dispatcher.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod grid;
pub mod metrics;
pub mod run;

pub use commands::run_command;
pub use error::{CliError, CliResult};
