use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("resource exhausted: {0}")]
    ResourceExhausted(String),

    #[error("busy, retry: {0}")]
    Retry(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("trace error at line {line}, column {column}: {message}")]
    Trace { line: usize, column: usize, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
