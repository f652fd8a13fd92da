use thiserror::Error;

#[derive(Debug, Error)]
pub enum DdpcError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("insufficient data: need at least {needed} samples, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("{0} is not symmetric positive semidefinite")]
    NotPsd(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("singular oracle: {0}")]
    SingularOracle(&'static str),
    #[error("ill-conditioned predictor: {what} has condition number {cond:.3e}")]
    IllConditioned { what: &'static str, cond: f64 },
    #[error("missing dependency: {0}")]
    MissingDependency(&'static str),
    #[error("unstable model: spectral radius {0:.6} is not below 1")]
    Unstable(f64),
    #[error("solver failed with status {0}")]
    Solver(ddpc_socp::Status),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, DdpcError>;

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(DdpcError::Dimension { what, expected, got })
    }
}
