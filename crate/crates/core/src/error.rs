use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::tensor::TensorError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed {what} at byte offset {offset}: {msg}")]
    Format {
        what: &'static str,
        offset: usize,
        msg: String,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("fusion: {0}")]
    Fusion(String),
    #[error("scene generation failed: {0}")]
    Generation(String),
    #[error("training diverged at step {step}: {msg}")]
    Divergence { step: u64, msg: String },
    #[error("{what} hash mismatch: expected {expected}, found {found}")]
    HashMismatch {
        what: &'static str,
        expected: String,
        found: String,
    },
    #[error("evaluation: {0}")]
    Eval(String),
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
