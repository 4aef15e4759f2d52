//! Textless BNF-to-BNF speech translation at desk scale.
//!
//! The engine maps bottleneck-feature analogs of a source utterance to
//! target-side features with an autoregressive attention decoder, then to a
//! mel-spectrogram analog with a non-autoregressive light-convolution stack.
//! Training, evaluation and the procedural parallel corpus are all seeded and
//! bitwise reproducible.

pub mod checkpoint;
pub mod config;
pub mod container;
pub mod evaluation;
pub mod numerics;
pub mod synthesizer;
pub mod toycorpus;
pub mod training;
pub mod translator;

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn dim(op: &str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op: op.to_string(),
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
