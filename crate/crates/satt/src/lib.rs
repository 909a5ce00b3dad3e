//! File formats, a threaded runtime and the `satt` command line on top of
//! `satt-core`.

pub mod artifacts;
pub mod cli;
pub mod config;
pub mod csvio;
pub mod error;
pub mod runtime;

pub use error::CliError;
