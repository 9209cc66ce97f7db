//! Pipelines behind the `tnf` command line tool: configuration files,
//! artifact bookkeeping and the end-to-end experiment runner.

pub mod config;
pub mod io;
pub mod pipeline;

pub use config::{parse_config, validate_config, ExperimentConfig};
pub use io::{Artifacts, Manifest, ManifestEntry};
pub use pipeline::run_pipeline;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad invocation or configuration; exit code 1.
    #[error("usage: {0}")]
    Usage(String),

    #[error("config: {0}")]
    Config(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<CliError>,
    },

    #[error(transparent)]
    Core(#[from] tnf_core::Error),

    #[error("{path}: {source}")]
    File {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// Process exit code: 1 for usage and configuration errors, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
