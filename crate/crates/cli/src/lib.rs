//! Library side of the `cpc` experiment runner: the config format, the
//! `generate`/`run` commands and cross-run reports.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;
pub mod stats;

pub use config::{Ablation, ExperimentConfig};
pub use error::{CliError, Result};
