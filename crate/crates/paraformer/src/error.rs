//! Error types shared across the crate.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Unified error type for dataset I/O, kernel preconditions and training.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("missing file: {path}")]
    MissingFile { path: PathBuf },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}:{line}: parse error: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    #[error("{file}:{line}: non-finite feature value in column {col}")]
    NonFiniteFeature {
        file: String,
        line: usize,
        col: usize,
    },

    #[error("{file}:{line}: label {label} out of range for {classes} classes")]
    LabelOutOfRange {
        file: String,
        line: usize,
        label: i64,
        classes: usize,
    },

    #[error("{file}:{line}: edge endpoint out of range: ({u}, {v}) with n={n}")]
    EdgeOutOfRange {
        file: String,
        line: usize,
        u: u64,
        v: u64,
        n: usize,
    },

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("k-nearest-neighbour graph needs 1 <= k < n, got k={k}, n={n}")]
    KnnArity { k: usize, n: usize },

    #[error("split of n={n} with fractions {fractions:?} leaves an empty subset")]
    DegenerateSplit { n: usize, fractions: (f64, f64, f64) },

    #[error("non-finite values in {context}")]
    NonFinite { context: String },

    #[error("matrix is not row-stochastic: row {row} sums to {sum:.12}")]
    NotRowStochastic { row: usize, sum: f64 },

    #[error("empty node mask for loss evaluation")]
    EmptyMask,

    #[error("empty matrix in {context}")]
    EmptyMatrix { context: String },

    #[error("{context} needs at least {needed} rows, got {got}")]
    TooFewRows {
        context: String,
        needed: usize,
        got: usize,
    },

    #[error("all rows are zero; cosine similarity is undefined")]
    AllRowsZero,

    #[error("decay parameter a={a} outside the open interval (0, 1/{n})")]
    DecayOutOfRange { a: f64, n: usize },

    #[error("non-finite loss at epoch {epoch}; offending tensors: {dump}")]
    NonFiniteLoss { epoch: usize, dump: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(context: &str, expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            context: context.to_string(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
