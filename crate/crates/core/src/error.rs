use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("items without a group attribute: {0:?}")]
    MissingAttribute(Vec<String>),

    #[error("item {item} has conflicting group labels {first:?} and {second:?}")]
    ConflictingAttribute {
        item: String,
        first: String,
        second: String,
    },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("user {0} has no unobserved items to sample from")]
    NoCandidates(usize),

    #[error("candidate sets differ between distributions")]
    CandidateMismatch,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("hash mismatch for {what}: expected {expected}, found {found}")]
    HashMismatch {
        what: String,
        expected: String,
        found: String,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 for configuration errors, 2 for data errors,
    /// 3 for failures during training or sampling.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::NoCandidates(_) | Error::CandidateMismatch | Error::NonFinite(_) => 3,
            _ => 2,
        }
    }
}
