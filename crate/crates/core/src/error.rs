use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("rank-deficient timing samples: {0}")]
    RankDeficient(String),

    #[error("round-time function is not monotone: adding coordinate {coord} changes cost by {marginal}")]
    NonMonotone { coord: usize, marginal: f64 },

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("cannot partition dataset: {0}")]
    Partition(String),

    #[error("bad magic number {found:#010x} in {what} (expected {expected:#010x})")]
    BadMagic { what: &'static str, found: u32, expected: u32 },

    #[error("truncated {what}: expected {expected} bytes, found {found}")]
    Truncated { what: &'static str, expected: u64, found: u64 },

    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] io::Error),
}
