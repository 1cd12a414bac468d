//! Command-line driver: config and job files, the subcommands, frame
//! metrics, and the self-test suite.

pub mod commands;
pub mod config;
pub mod error;
pub mod job;
pub mod metrics;
pub mod selftest;

pub use commands::{main_with, run, Cli};
pub use error::{CliError, Result};
