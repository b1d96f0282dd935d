//! Batch pipeline and command-line front end: region extraction, dataset
//! building, training, detection, evaluation and dataset transforms.

pub mod cli;
pub mod commands;
pub mod config;
mod error;
pub mod pipeline;

pub use error::CliError;
