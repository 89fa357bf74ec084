use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("spectrogram kind error: {0}")]
    Kind(String),

    #[error("attention row {row} has no allowed keys")]
    MaskedRow { row: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("ingestion error: {0}")]
    Ingest(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// True for errors a caller should treat as bad configuration rather than bad data.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Kind(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
