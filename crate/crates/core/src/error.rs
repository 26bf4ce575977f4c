use std::path::PathBuf;

use tdsv_nn::NnError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed audio: {0}")]
    Format(String),
    #[error("unsupported audio encoding: {0}")]
    Unsupported(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("value out of domain: {0}")]
    Domain(String),
    #[error("input too short: need {needed} {unit}, got {got}")]
    TooShort {
        needed: usize,
        got: usize,
        unit: &'static str,
    },
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("not found: {0}")]
    Lookup(String),
    #[error("trial protocol: {0}")]
    Protocol(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Nn(NnError::Shape(msg.into()))
    }
}
