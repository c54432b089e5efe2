use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid value for `{key}`: {msg}")]
    Validation { key: String, msg: String },

    #[error("unlearning strategy error: {0}")]
    Strategy(String),

    #[error("history file: {0}")]
    History(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn validation(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Validation {
            key: key.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
