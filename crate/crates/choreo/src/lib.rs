//! File formats, checkpoints, run configuration and the pipeline stages
//! behind the `choreo` command line.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod io;

pub use config::RunConfig;
pub use error::{CliError, Result};
