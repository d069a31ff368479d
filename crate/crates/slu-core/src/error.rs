//! Crate-wide error type and exit-code taxonomy.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SluError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("unsupported sample rate {rate} Hz (expected 16000)")]
    UnsupportedRate { rate: u32 },
    #[error("manifest schema error: missing column `{0}`")]
    Schema(String),
    #[error("manifest row error at line {line}: {msg}")]
    Row { line: usize, msg: String },
    #[error("constraint not satisfiable: {0}")]
    Constraint(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
}

impl SluError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SluError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code class for this error: 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            SluError::InvalidArgument(_) | SluError::Config(_) => 1,
            SluError::Numeric(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, SluError>;
