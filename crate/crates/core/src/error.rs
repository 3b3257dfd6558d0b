use std::io;

use thiserror::Error;

/// Errors produced by the analysis toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("index out of bounds: {what} = {index}, limit {limit}")]
    Bounds {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("shape mismatch: expected {expected}, found {found}")]
    Shape { expected: usize, found: usize },

    #[error("wrong tensor kind: expected {expected}, found {found}")]
    Kind {
        expected: &'static str,
        found: &'static str,
    },

    #[error("similarity undefined: {0}")]
    UndefinedSimilarity(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("degenerate spectrum: all channel contributions are zero")]
    DegenerateSpectrum,

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("invalid generator spec: {0}")]
    Spec(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("invalid scores: {0}")]
    Score(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_index(what: &'static str, index: usize, limit: usize) -> Result<()> {
    if index < limit {
        Ok(())
    } else {
        Err(Error::Bounds { what, index, limit })
    }
}
