use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape for {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid value in {op}: {detail}")]
    Value { op: &'static str, detail: String },

    #[error("index {index} out of range for {what} of length {len}")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("config error at `{key}`: {detail}")]
    Config { key: String, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("unexpected end of data while reading {what} (needed {needed} bytes, {available} available)")]
    UnexpectedEof {
        what: String,
        needed: usize,
        available: usize,
    },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("non-finite loss in phase `{phase}` epoch {epoch} step {step}\n{dump}")]
    NonFiniteLoss {
        phase: String,
        epoch: usize,
        step: usize,
        dump: String,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(key: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            detail: detail.into(),
        }
    }

    /// True for errors caused by bad user input (configs, flags, policies)
    /// rather than by a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Config { .. })
    }
}
