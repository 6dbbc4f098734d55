use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,

    #[error("I/O error reading {path} at line {line}: {source}")]
    ReadAt {
        path: PathBuf,
        line: usize,
        #[source]
        source: std::io::Error,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("context length must be positive")]
    ZeroContext,

    #[error("invalid split fractions: {0}")]
    InvalidFractions(String),

    #[error("shape mismatch: expected {expected} parameters, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("divergent gradient")]
    DivergentGradient,

    #[error("divergent gradient at batch index {0}")]
    DivergentExample(usize),

    #[error("invalid privacy spec: {0}")]
    InvalidPrivacySpec(String),

    #[error("invalid training config: {0}")]
    InvalidConfig(String),

    #[error("invalid accountant input: {0}")]
    Accountant(String),

    #[error("target epsilon unreachable")]
    EpsilonUnreachable,

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("incomplete manifest: {0}")]
    IncompleteManifest(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}
