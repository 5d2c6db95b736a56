use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A file or payload could not be parsed; `field` names the offending part.
    #[error("format error in `{field}`: {message}")]
    Format { field: String, message: String },

    /// A synthetic page could not be generated from the given configuration.
    #[error("generation error: {0}")]
    Generation(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// An internal structural check failed.
    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            message: message.into(),
        }
    }
}
