//! Batch pipeline around `dtr_core`: a TOML run configuration, staged
//! execution with artifact files, and a manifest for reproducibility checks.

pub mod config;
pub mod error;
pub mod pipeline;

pub use config::RunConfig;
pub use error::CliError;
pub use pipeline::{run_pipeline, run_simulation, RunOutput, Stage};
