use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: String, reason: String },

    #[error("input not sorted at position {position}")]
    Unsorted { position: usize },

    #[error("channel {channel} at position {position} is not registered in the stream header")]
    UnknownChannel { channel: u8, position: usize },

    #[error("stream format error: {0}")]
    Format(String),

    #[error("truncated record at byte offset {offset}")]
    Truncated { offset: u64 },

    #[error("grid geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("input size {size} exceeds the brute-force guard of {limit}")]
    GuardExceeded { size: usize, limit: usize },

    #[error("degenerate analysis: {0}")]
    Degenerate(String),

    #[error("manifest mismatch: {0}")]
    Manifest(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn param(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
