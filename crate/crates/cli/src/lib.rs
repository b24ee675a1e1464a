//! Subcommands of the `maskprop` binary, the experiment pipeline and the
//! verification HTTP server.

pub mod args;
pub mod commands;
pub mod error;
pub mod experiment;
pub mod server;

pub use args::Cli;
pub use error::{CliError, CliResult};
