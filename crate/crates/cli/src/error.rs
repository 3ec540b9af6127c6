use std::path::PathBuf;

use fedshare_core::{Error as CoreError, ErrorCategory};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: CoreError,
    },
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing artifacts in {dir}: {}", missing.join(", "))]
    MissingArtifacts { dir: PathBuf, missing: Vec<String> },
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    /// 0 success, 2 validation, 3 infeasibility, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        let core = match self {
            CliError::Stage { source, .. } => source,
            CliError::Core(e) => e,
            _ => return 2,
        };
        match core.category() {
            ErrorCategory::Validation => 2,
            ErrorCategory::Infeasible => 3,
            ErrorCategory::Numerical => 4,
        }
    }
}

/// Tags a core error with the pipeline stage that produced it.
pub trait StageExt<T> {
    fn stage(self, stage: &'static str) -> CliResult<T>;
}

impl<T> StageExt<T> for fedshare_core::Result<T> {
    fn stage(self, stage: &'static str) -> CliResult<T> {
        self.map_err(|source| CliError::Stage { stage, source })
    }
}
