use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid graph state: {0}")]
    State(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

pub type Result<T> = std::result::Result<T, NnError>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(NnError::Shape(msg.into()))
}
