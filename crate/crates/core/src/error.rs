use std::path::PathBuf;

/// Errors raised anywhere in the restoration pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid hyperparameters, flags, or mismatched dimensions supplied by the caller.
    #[error("configuration error: {0}")]
    Config(String),
    /// Tensor shapes that do not line up inside a computation.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// NaN or infinity appeared in a value that must stay finite.
    #[error("numeric failure: {0}")]
    Numeric(String),
    /// Malformed or inconsistent file contents.
    #[error("format error: {0}")]
    Format(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}
macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
pub(crate) use config_err;
pub(crate) use shape_err;
