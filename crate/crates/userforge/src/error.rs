//! Crate-wide error type.
//!
//! Variants are grouped so the CLI can map them onto its exit-code contract:
//! configuration/usage problems, data problems, and gateway problems are
//! distinguishable without string matching.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("source mismatch: expected {expected}, got {got}")]
    SourceMismatch { expected: String, got: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("gateway transport error after {attempts} attempt(s): {detail}")]
    Transport { attempts: u32, detail: String },

    #[error("gateway timeout after {0} ms")]
    Timeout(u64),

    #[error("stage `{stage}` failed: {detail}")]
    Stage { stage: String, detail: String },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    /// True for errors caused by the LLM endpoint rather than local data.
    pub fn is_gateway(&self) -> bool {
        matches!(self, Error::Transport { .. } | Error::Timeout(_))
    }

    /// True for configuration or usage errors.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Template(_))
    }
}
