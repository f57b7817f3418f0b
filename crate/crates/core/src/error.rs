use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("malformed input: {0}")]
    Format(String),

    #[error("storage error at {path}: {source}")]
    Storage {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    /// The ground truth carries no ranking information (constant vector).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("training diverged: {0}")]
    Training(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// A pipeline step ran before the step that produces its input.
    #[error("missing prerequisite {artifact} (run `{producer}` first)")]
    MissingPrerequisite {
        artifact: PathBuf,
        producer: &'static str,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit code: 2 configuration, 3 missing prerequisite, 4 numeric
    /// failure, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parameter(_) => 2,
            Error::MissingPrerequisite { .. } => 3,
            Error::Numeric(_) | Error::Training(_) | Error::Degenerate(_) => 4,
            _ => 1,
        }
    }

    pub(crate) fn storage(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Storage {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
