//! Configuration-driven experiment runner behind the `projres` binary.

pub mod config;
pub mod error;
pub mod output;
pub mod runner;
pub mod trace_io;

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
