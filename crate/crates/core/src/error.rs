use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: malformed record: {message}")]
    MalformedRecord { line: usize, message: String },

    #[error("record `{id}`: {message}")]
    InvalidRecord { id: String, message: String },

    #[error("duplicate record id `{0}`")]
    DuplicateId(String),

    #[error("unknown CWE identifier `{id}` (valid: {valid})")]
    UnknownCwe { id: String, valid: String },

    #[error("dataset too small to split: {0} records (need at least 10)")]
    DatasetTooSmall(usize),

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("line {line}: {message}")]
    Lex { line: usize, message: String },

    #[error("source is empty")]
    EmptySource,

    #[error("no function definitions found: {0}")]
    NoFunctions(String),

    #[error("graph construction: {0}")]
    Graph(String),

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("backward already ran on this tape; reset it first")]
    BackwardTwice,

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: usize, size: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("ensemble weights must be non-negative and sum to 1 (kappa={kappa}, lambda={lambda})")]
    EnsembleWeights { kappa: f64, lambda: f64 },

    #[error(
        "non-finite loss at epoch {epoch}, batch {batch}; parameter norms: {}",
        format_norms(.param_norms)
    )]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        param_norms: Vec<(String, f64)>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("attribution: {0}")]
    Attribution(String),

    #[error("invalid line range {start}..={end}")]
    InvalidRange { start: usize, end: usize },

    #[error("metrics: {0}")]
    Metrics(String),

    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (datasets, sources, configs)
    /// rather than by a defect in the pipeline itself.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::MalformedRecord { .. }
                | Error::InvalidRecord { .. }
                | Error::DuplicateId(_)
                | Error::UnknownCwe { .. }
                | Error::DatasetTooSmall(_)
                | Error::InvalidSplit(_)
                | Error::Lex { .. }
                | Error::EmptySource
                | Error::NoFunctions(_)
                | Error::Graph(_)
                | Error::Config(_)
                | Error::EnsembleWeights { .. }
                | Error::Checkpoint(_)
                | Error::Json(_)
        )
    }
}

fn format_norms(norms: &[(String, f64)]) -> String {
    norms
        .iter()
        .map(|(name, n)| format!("{name}={n:.4e}"))
        .collect::<Vec<_>>()
        .join(", ")
}
