use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty text cannot be tokenized")]
    EmptyText,
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("batch has no examples")]
    EmptyBatch,
    #[error("sequence row {0} has zero length")]
    EmptySequence(usize),
    #[error("pair {id}: {reason}")]
    InvalidPair { id: String, reason: String },
    #[error("token id {id} outside vocabulary of size {size}")]
    IdOutOfRange { id: usize, size: usize },
    #[error("{0} pool is empty")]
    EmptyPool(&'static str),
    #[error("no retrieval candidates left after excluding {0:?}")]
    NoCandidates(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite loss in component {component} at step {step}")]
    NonFiniteLoss { component: String, step: u64 },
    #[error("unsupported {what} version {found} (expected {expected})")]
    Version { what: &'static str, found: u32, expected: u32 },
    #[error("corrupt {what}: {reason}")]
    Corrupt { what: &'static str, reason: String },
    #[error("{path}:{line}: {reason}")]
    Parse { path: String, line: usize, reason: String },
    #[error("{path}: {source}")]
    File { path: String, source: std::io::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Tags an I/O error with the path it concerns.
pub fn at(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::File { path: path.display().to_string(), source }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
