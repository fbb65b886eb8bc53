use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::pwl::PwlError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error(transparent)]
    Pwl(#[from] PwlError),
    #[error("{path}: malformed data at byte {offset}: {message}")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("non-finite {what} at step {step} in `{tensor}`")]
    NonFinite {
        what: &'static str,
        step: u64,
        tensor: String,
    },
    #[error("gradient oracle: {0}")]
    Oracle(String),
    #[error("model error: {0}")]
    Model(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("internal error: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit status for the command-line tool: 2 for configuration
    /// and usage errors, 3 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) | Error::Usage(_) => 2,
            _ => 3,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn io(context: impl Into<String>, source: io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
