use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("format error in field `{field}`: {msg}")]
    Format { field: String, msg: String },

    #[error("truncated payload: expected {expected} values, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("numeric divergence at epoch {epoch}: {msg}")]
    Divergence { epoch: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn format(field: &str, msg: impl Into<String>) -> Self {
        Error::Format { field: field.to_string(), msg: msg.into() }
    }

    pub(crate) fn shape(expected: impl std::fmt::Debug, actual: impl std::fmt::Debug) -> Self {
        Error::Shape { expected: format!("{expected:?}"), actual: format!("{actual:?}") }
    }
}
