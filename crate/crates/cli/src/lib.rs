//! Dataset handling, run configuration and the command implementations
//! behind the `vig-unet` binary.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;

pub use config::RunConfig;
pub use error::{CliError, Result};
