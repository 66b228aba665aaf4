use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    Parameter { name: &'static str, reason: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("configuration error in `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("image format error: {0}")]
    Format(String),

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("truncated input: {0}")]
    Truncated(String),

    #[error("dimension overflow: {width}x{height}")]
    DimensionOverflow { width: u64, height: u64 },

    #[error("watermark composition failed: {0}")]
    Composition(String),

    #[error("trace error: {0}")]
    Trace(String),

    #[error("checksum mismatch for sample `{sample}`: expected {expected:08x}, found {found:08x}")]
    Checksum {
        sample: String,
        expected: u32,
        found: u32,
    },

    #[error("replay exhausted for sample `{sample}`: step {step} but only {recorded} recorded")]
    ReplayExhausted {
        sample: String,
        step: usize,
        recorded: usize,
    },

    #[error("token id {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },

    #[error("cannot access {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::Parameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user-supplied settings rather than bad data.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Parameter { .. } | Error::Config { .. } | Error::TokenOutOfRange { .. }
        )
    }
}
