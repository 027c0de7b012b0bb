use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("row {row} of the attention mask allows no key")]
    EmptyMaskRow { row: usize },

    #[error("invalid positions: {0}")]
    Position(String),

    #[error("config hash mismatch: expected {expected}, found {found}")]
    ConfigHashMismatch { expected: String, found: String },

    #[error("token {token} is outside the vocabulary (size {vocab_size})")]
    OutOfVocab { token: u32, vocab_size: usize },

    #[error("block id {got} cannot be appended, next id is {expected}")]
    BlockIdGap { expected: usize, got: usize },

    #[error("unknown unit {0}")]
    UnknownUnit(String),

    #[error("duplicate unit {0} in selection")]
    DuplicateUnit(String),

    #[error("invalid selection: {0}")]
    Selection(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("{path}:{line}: {message}")]
    Dataset {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad input or configuration rather than by the
    /// environment (I/O).
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io(_))
    }
}
