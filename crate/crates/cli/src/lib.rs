//! Experiment runner around the `bmsfed` simulator: config parsing, single
//! runs that write `metrics.csv`/`summary.json`, and multi-seed comparisons.

pub mod compare;
pub mod config;
pub mod runner;

use std::path::PathBuf;

pub use compare::{compare_methods, ComparisonRow};
pub use config::ExperimentConfig;
pub use runner::{run_experiment, RunOutput};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config line {line}, key `{key}`: {msg}")]
    Config { line: usize, key: String, msg: String },
    #[error("inconsistent configs: {0}")]
    Consistency(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("simulation failed: {0}")]
    Simulation(#[from] bmsfed::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}
