use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Requested class count cannot be placed as a regular simplex.
    #[error("k > n+1: cannot place {k} equiangular centroids in {n} dimensions")]
    Dimension { k: usize, n: usize },

    #[error("numerical rank {found} of centroid span differs from expected {expected}")]
    NumericalRank { expected: usize, found: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("batch size {0} too small (need at least 2)")]
    BatchSize(usize),

    #[error("zero-norm feature vector at row {0}")]
    ZeroVector(usize),

    #[error("label {label} at row {row} out of range for {classes} classes")]
    Label {
        row: usize,
        label: usize,
        classes: usize,
    },

    #[error("{path}: parse error at byte offset {offset}: {msg}")]
    Format {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    #[error("covariance of class {class} is not positive definite after shrinkage")]
    SingularCovariance { class: usize },

    #[error("forward caches are stale: {0}")]
    StaleCache(String),

    #[error("training diverged at epoch {epoch}, batch {batch} (loss = {loss})")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset,
            msg: msg.into(),
        }
    }
}
