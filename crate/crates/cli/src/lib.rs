//! Pipeline commands behind the `kanrecon` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod fsutil;

pub use config::RunConfig;
pub use error::{exit, CliError, CliResult};
