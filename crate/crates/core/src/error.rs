use thiserror::Error;

/// Errors surfaced by any module in this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Input failed a precondition (shape, range, emptiness).
    #[error("validation: {0}")]
    Validation(String),

    /// Signal shorter than the minimum the operation can consume.
    #[error("signal too short: {0}")]
    TooShort(String),

    /// A value that must be finite was NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Malformed configuration.
    #[error("config: {0}")]
    Config(String),

    /// Checkpoint container could not be read or written.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// Dataset manifest problems (missing fields, missing files).
    #[error("dataset: {0}")]
    Dataset(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
}
