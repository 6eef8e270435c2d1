//! Crate-wide error type. Everything fallible returns [`Result`].

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Malformed CSV cell or header. Rows are 1-based counting the header.
    #[error("csv parse error at row {row}, column {col}: {msg}")]
    CsvParse { row: usize, col: usize, msg: String },

    /// A configuration value violates a documented precondition.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// NaN or infinity appeared where a finite value is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// An operation was asked of a family/fit combination that cannot do it.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// Work refused because it would exceed a hard size guard.
    #[error("instance too large: {0}")]
    TooLarge(String),

    #[error("linear system is singular or not positive definite")]
    SingularSystem,

    #[error("optimization diverged: {0}")]
    Diverged(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io { path: path.display().to_string(), source }
    }
}
