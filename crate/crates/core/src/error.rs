use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the search pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("class {0} has no samples")]
    EmptyClass(usize),

    #[error("class {0} has a zero-norm centroid")]
    DegenerateCentroid(usize),

    #[error("row {row} has zero norm")]
    DegenerateEmbedding { row: usize },

    #[error("discriminability of sample {index} is undefined (hardest negative similarity {max_negative} <= 0)")]
    UndefinedRatio { index: usize, max_negative: f64 },

    #[error("degenerate dataset: {0}")]
    DegenerateDataset(String),

    #[error("training diverged at step {step}")]
    Diverged { step: usize },

    #[error("parameter {param} value {value} is not on its grid")]
    OffGrid { param: &'static str, value: f64 },

    #[error("token {token} out of range for {param} (grid size {len})")]
    TokenOutOfRange {
        param: &'static str,
        token: usize,
        len: usize,
    },

    #[error("cannot draw {requested} {kind} pairs, only {available} exist")]
    InsufficientPairs {
        kind: &'static str,
        requested: usize,
        available: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("schema version {found} is not supported (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    RawIo(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
