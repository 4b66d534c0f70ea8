//! Command-line front end: feature extraction, training with
//! cross-validation, prediction, fusion, reports, model inspection and a
//! synthetic corpus generator.

pub mod commands;
pub mod config;
pub mod error;
pub mod fsutil;
pub mod synth;

pub use config::RunConfig;
pub use error::CliError;
