//! Experiment runner for conditional flow matching: configuration, data
//! generation, training, sampling, evaluation and the toy overfitting study,
//! each recorded in a checksummed run manifest.

// `!(a > b)` rejects NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::large_enum_variant)]

pub mod app;
pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;
pub mod manifest;

pub use config::{parse_config, CheckpointRef, ConfigError, ExperimentConfig, Problem};
pub use error::{CliError, CliResult, ExitStatus};
pub use experiment::Experiment;
pub use manifest::RunManifest;
