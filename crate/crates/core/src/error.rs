use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("y4m parse error at byte {offset}: {message}")]
    Y4mParse { offset: u64, message: String },

    #[error("truncated frame {frame}: expected {expected} bytes, found {found}")]
    PartialFrame {
        frame: usize,
        expected: usize,
        found: usize,
    },

    #[error("invalid clip: {0}")]
    InvalidClip(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("QP probe failed: {0}")]
    Probe(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("codec `{codec}` failed (exit status {status}): {command}\n{stderr}")]
    Codec {
        codec: String,
        command: String,
        status: String,
        stderr: String,
    },

    #[error("metric tool error: {0}")]
    Metric(String),

    #[error("non-finite value during training step {step}: {diagnostic}")]
    NonFinite { step: u64, diagnostic: String },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors caused by bad user input or configuration, as opposed to
    /// failures during computation. The CLI maps these to exit code 2.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Checkpoint(_))
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
