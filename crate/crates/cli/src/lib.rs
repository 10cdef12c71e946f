//! File formats and commands behind the `refac` binary.

pub mod commands;
pub mod config;
pub mod data;
pub mod error;

pub use commands::{cmd_analyze, cmd_design, cmd_simulate, cmd_sweep, cmd_thresholds};
pub use error::{CliError, CliResult};
