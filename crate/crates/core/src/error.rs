use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("instance invalid: box {index} {reason}")]
    InstanceInvalid { index: usize, reason: String },

    #[error("invalid action: {0}")]
    InvalidAction(String),

    #[error("gap ratio is undefined for an empty packing")]
    UndefinedMetric,

    #[error("episode complete: no unpacked box is selectable")]
    EpisodeComplete,

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error at line {line}: {message}")]
    Validation { line: usize, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("packing violates {0}")]
    Infeasible(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidInput(_) => 2,
            Error::InstanceInvalid { .. }
            | Error::Parse { .. }
            | Error::Validation { .. }
            | Error::Infeasible(_) => 3,
            _ => 4,
        }
    }
}
