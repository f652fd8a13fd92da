use ddpc_core::DdpcError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    /// Malformed or inconsistent configuration, rejected before any work.
    #[error("{0}")]
    Config(String),
    #[error("invalid scenario: {0}")]
    Invalid(DdpcError),
    #[error(transparent)]
    Runtime(#[from] DdpcError),
    #[error("run aborted: {0}")]
    Aborted(String),
    #[error("missing artifact {0}")]
    MissingArtifact(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("thread pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
}

impl HarnessError {
    /// 1 for anything rejected during validation, 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Invalid(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
