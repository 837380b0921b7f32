use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("line {line}: unknown token {token:?}")]
    UnknownToken { token: String, line: usize },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("unsupported version: {0}")]
    Version(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    /// Training produced a non-finite loss. `last_good` holds the serialized
    /// checkpoint of the most recent finite state.
    #[error("training diverged at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize, last_good: Vec<u8> },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
