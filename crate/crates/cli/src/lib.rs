//! Orchestration for the fedshare simulator: configuration, the end-to-end
//! pipeline, sweeps, theory checks and reports.

pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod report;
pub mod sweep;
pub mod theory_check;

pub use commands::{run, Cli, Command};
pub use config::RunConfig;
pub use error::{CliError, CliResult};
