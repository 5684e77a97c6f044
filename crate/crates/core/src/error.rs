use std::path::PathBuf;

/// Errors raised by the morphing engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("non-finite matrix entry")]
    NonFinite,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("particle {index} at {position:?} is outside the grid interior margin")]
    OutsideMargin { index: usize, position: [f64; 3] },

    #[error("tape mismatch: {0}")]
    TapeMismatch(String),

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("snapshot format error: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
