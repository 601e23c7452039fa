//! Config-driven experiments on Birman–Schwinger spectra: runs, sweeps, verification suites and export.

pub mod config;
pub mod error;
pub mod experiment;
pub mod output;
pub mod verify;

pub use error::{CliError, CliResult};
