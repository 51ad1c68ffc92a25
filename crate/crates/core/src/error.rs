use thiserror::Error;

/// Errors raised across the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("sample set is empty")]
    EmptySample,
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unsupported tensor order {order} (max {max})")]
    UnsupportedOrder { order: usize, max: usize },
    #[error("size guard exceeded: {0}")]
    GuardExceeded(String),
    #[error("degenerate kernel: {0}")]
    DegenerateKernel(String),
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("matrix is not symmetric")]
    NotSymmetric,
    #[error("factorization failed: {0}")]
    Factorization(String),
    #[error("non-finite objective: {0}")]
    NonFinite(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
