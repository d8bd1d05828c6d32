//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {details}")]
    Shape { op: String, details: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("invalid transcript: {0}")]
    Transcript(String),

    #[error("out-of-vocabulary word: {0:?}")]
    OutOfVocabulary(String),

    #[error("concurrency {found} exceeds the supported maximum of {max}")]
    Concurrency { found: usize, max: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("decode error: {0}")]
    Decode(String),

    #[error("scoring error: {0}")]
    Scoring(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("refusing operation: {0}")]
    Refused(String),

    #[error("oracle limit exceeded: {0}")]
    OracleLimit(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {details}")]
    Parse { path: String, details: String },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(op: impl Into<String>, details: impl Into<String>) -> Self {
        Error::Shape {
            op: op.into(),
            details: details.into(),
        }
    }

    pub fn parse(path: impl Into<String>, details: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            details: details.into(),
        }
    }
}
