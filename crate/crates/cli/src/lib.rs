//! Command-line front end: run configuration, subcommands and PNG output.

pub mod commands;
pub mod config;
pub mod error;
pub mod plot;

pub use config::RunConfig;
pub use error::CliError;
