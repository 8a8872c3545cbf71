use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("unsupported resolution {0}")]
    Resolution(usize),
    #[error("holdout contamination: {0}")]
    Contamination(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl From<png::EncodingError> for Error {
    fn from(e: png::EncodingError) -> Self {
        Error::Format(format!("png encode: {e}"))
    }
}

impl From<png::DecodingError> for Error {
    fn from(e: png::DecodingError) -> Self {
        Error::Format(format!("png decode: {e}"))
    }
}
