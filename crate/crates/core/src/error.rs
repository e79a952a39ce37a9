use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic bytes {found:?}, expected \"BEVT\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported BEVT version {0}")]
    UnsupportedVersion(u8),

    #[error("unsupported dtype code {0:#04x}")]
    UnsupportedDtype(u8),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("truncated tensor data: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("trailing data: expected {expected} bytes, found {found}")]
    TrailingBytes { expected: usize, found: usize },

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("malformed config: {0}")]
    ConfigParse(#[from] serde_json::Error),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: &str, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.to_string(),
            reason: reason.into(),
        }
    }
}
