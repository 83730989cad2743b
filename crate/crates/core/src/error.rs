//! Error types shared across the crate.
//!
//! Every error belongs to a family; the CLI maps families to distinct
//! nonzero exit codes.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("optimizer divergence: {0}")]
    OptimizerDivergence(String),

    #[error("vocabulary format error: {0}")]
    VocabFormat(String),

    #[error("invalid token id {id} (vocab size {size})")]
    TokenId { id: usize, size: usize },

    #[error("sequence length {len} exceeds maximum {max}")]
    Length { len: usize, max: usize },

    #[error("archive format error: {0}")]
    ArchiveFormat(String),

    #[error("checkpoint incompatibility: {0}")]
    Incompatible(String),

    #[error("mapping rule error: {0}")]
    Rule(String),

    #[error("layer selection error: {0}")]
    Selection(String),

    #[error("init scheme error: {0}")]
    Scheme(String),

    #[error("training error at step {step}: {msg}")]
    Training { step: usize, msg: String },

    #[error("degenerate dataset: no usable examples")]
    DegenerateDataset,

    #[error("degenerate corpus: no usable evaluation rows")]
    DegenerateCorpus,

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable exit code per error family, used by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape(_) | Error::Length { .. } => 10,
            Error::NonFinite(_) | Error::OptimizerDivergence(_) => 11,
            Error::DegenerateBatch(_) | Error::DegenerateDataset | Error::DegenerateCorpus => 12,
            Error::VocabFormat(_) | Error::TokenId { .. } => 13,
            Error::ArchiveFormat(_) => 14,
            Error::Incompatible(_) | Error::Scheme(_) => 15,
            Error::Rule(_) | Error::Selection(_) => 16,
            Error::Training { .. } => 17,
            Error::Config(_) => 18,
            Error::Io(_) => 19,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
