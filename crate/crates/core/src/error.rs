use std::path::PathBuf;

/// Errors raised across the lip-reading pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("capacity error: {0}")]
    Capacity(String),
    #[error("infeasible alignment: {0}")]
    InfeasibleAlignment(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
