//! Files, configuration and the `relprox` command line around `relprox-core`.

pub mod ablation;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod corpus_io;
pub mod error;
pub mod metrics_log;

pub use config::ExperimentConfig;
pub use error::{CliError, Result};
