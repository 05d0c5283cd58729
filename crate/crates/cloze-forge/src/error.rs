use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),
    #[error("checkpoint fingerprint mismatch: expected {expected:#018x}, found {found:#018x}")]
    FingerprintMismatch { expected: u64, found: u64 },
    #[error("bad file format: {0}")]
    Format(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
