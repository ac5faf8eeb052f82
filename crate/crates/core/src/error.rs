use thiserror::Error;

/// Errors produced by the core library.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Error {
    #[error("input is not valid UTF-8: {0}")]
    Encoding(#[from] std::str::Utf8Error),

    #[error("invalid policy: {0}")]
    InvalidPolicy(String),

    #[error("ratio is undefined for a zero-length context")]
    UndefinedRatio,

    #[error("sentinel marker occurs verbatim in content")]
    SentinelCollision,

    #[error("malformed injection block at byte {at}: {reason}")]
    MalformedInjection { at: usize, reason: &'static str },

    #[error("exponent {exponent} exceeds the configured cap of {cap}")]
    MagnitudeOverflow { exponent: u64, cap: u64 },

    #[error("invalid context: {0}")]
    InvalidContext(String),

    #[error("interruption messages cannot be supplied as external input")]
    SpoofedInterruption,

    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
