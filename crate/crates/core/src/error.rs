use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the sparsification pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("mask hierarchy violated at stage {stage}: token {token} is retained after being pruned")]
    Hierarchy { stage: usize, token: usize },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("load error: {0}")]
    Load(String),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite value produced by `{0}`")]
    NonFinite(&'static str),

    #[error("training diverged at epoch {epoch}; last good checkpoint: {checkpoint:?}")]
    Diverged { epoch: usize, checkpoint: Option<PathBuf> },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}
