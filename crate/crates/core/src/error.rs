use thiserror::Error;

/// Crate-wide error type. The CLI maps variants onto exit codes, so new
/// variants should keep the parse/validate vs. planning vs. execution split.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("bad tensor format: {0}")]
    Format(String),

    #[error("unsupported dtype code {0} (only f32, code 0, is supported)")]
    UnsupportedDtype(u32),

    #[error("truncated tensor payload: expected {expected} bytes, found {actual}")]
    TruncatedPayload { expected: u64, actual: u64 },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("planning error: {0}")]
    Planning(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("serialize error: {0}")]
    Serialize(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
