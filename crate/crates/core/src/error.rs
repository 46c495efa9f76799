use thiserror::Error;

/// Errors produced anywhere in the sampler, runtime, or tooling.
#[derive(Debug, Error)]
pub enum SbartError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("protocol error (rank {rank}): {msg}")]
    Protocol { rank: usize, msg: String },

    #[error("transport error: {0}")]
    Transport(String),

    #[error("replica on rank {rank} is desynchronized from the master")]
    Desynchronized { rank: usize },

    #[error("internal consistency check failed: {0}")]
    Consistency(String),

    #[error("parse error at row {row}, column {column}: {msg}")]
    Parse {
        row: usize,
        column: String,
        msg: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("startup error: {0}")]
    Startup(String),

    #[error("I/O error: {0}")]
    Io(std::io::Error),
}

// Not `#[from]`: that would also mark the io error as the source, and
// chained reports would print its message twice.
impl From<std::io::Error> for SbartError {
    fn from(e: std::io::Error) -> Self {
        SbartError::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, SbartError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(SbartError::InvalidArgument(msg.into()))
}
