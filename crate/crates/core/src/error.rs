use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad shapes, axes or out-of-range arguments.
    #[error("argument error: {0}")]
    Argument(String),

    /// A caller-side precondition was violated (e.g. more queries than slots).
    #[error("contract error: {0}")]
    Contract(String),

    /// NaN/Inf or a degenerate value where a finite one is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("validation error in sample {sample}: {msg}")]
    Validation { sample: usize, msg: String },

    #[error("generation error: {0}")]
    Generation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Format { .. } | Error::Validation { .. } | Error::Generation(_) => 3,
            Error::Numeric(_) => 4,
            Error::Io(_) => 3,
            Error::Argument(_) | Error::Contract(_) => 1,
        }
    }
}
