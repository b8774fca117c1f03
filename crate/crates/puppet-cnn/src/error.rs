use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A documented precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A binary file (dataset, checkpoint, image) failed to parse.
    #[error("format error in {path:?} at byte {offset}: {message}")]
    Format {
        path: PathBuf,
        offset: usize,
        message: String,
    },

    /// Bad key or value in a config file or on the command line.
    #[error("config error: {0}")]
    Config(String),

    /// Training or evaluation produced a non-finite value.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn format(path: impl Into<PathBuf>, offset: usize, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset,
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 usage, 3 format, 4 numeric.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) | Error::Contract(_) | Error::Dimension(_) => 2,
            Error::Format { .. } | Error::Io { .. } => 3,
            Error::Numeric(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
