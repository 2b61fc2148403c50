use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, StapError>;

#[derive(Debug, Error)]
pub enum StapError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("data error: {0}")]
    Data(String),

    /// Forward evaluation produced a non-finite value.
    #[error("evaluation error in {kernel}: non-finite output at {location}")]
    Evaluation { kernel: String, location: String },

    /// Training step aborted; `tensor` names the first non-finite tensor found.
    #[error("non-finite value in {tensor}")]
    NonFinite { tensor: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl StapError {
    pub fn shape(msg: impl Into<String>) -> Self {
        StapError::Shape(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        StapError::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        StapError::Io {
            path: path.into(),
            source,
        }
    }
}
