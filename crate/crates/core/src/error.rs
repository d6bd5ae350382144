//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point behind camera (z = {z:.3e})")]
    BehindCamera { z: f64 },

    #[error("depth must be positive, got {depth}")]
    InvalidDepth { depth: f64 },

    #[error("zero-norm quaternion cannot be normalized")]
    DegenerateQuaternion,

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("degenerate point configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("optimization diverged at step {step}: {what}")]
    Divergence { step: usize, what: String },

    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),

    #[error("malformed PLY: {0}")]
    MalformedPly(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    FileFormat { path: PathBuf, message: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn file_format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::FileFormat {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn shape(expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            expected: expected.into(),
            got: got.into(),
        }
    }
}
