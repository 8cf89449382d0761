use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("invalid config: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    #[error("training diverged at step {step}: {loss} = {value}")]
    Divergence {
        step: u64,
        loss: String,
        value: f64,
    },

    #[error("unknown ablation {name:?}; valid names: {valid}")]
    UnknownAblation { name: String, valid: String },

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
