//! File formats, synthetic data and command-line entry points around the
//! `pyramidflow` core.

pub mod augment;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod fsio;
pub mod netpbm;
pub mod synth;

pub use commands::run;
pub use error::{CliError, CliResult};
