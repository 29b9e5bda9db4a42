//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An API contract was violated (bad argument, wrong call order).
    #[error("contract error: {0}")]
    Contract(String),

    /// A file could not be parsed; the message names the offending field.
    #[error("parse error: {0}")]
    Parse(String),

    /// The dataset is structurally unusable (empty slide, no cells in any spot).
    #[error("dataset error: {0}")]
    Dataset(String),

    /// Graph construction failed.
    #[error("graph error: {0}")]
    Graph(String),

    /// Stain basis fitting failed.
    #[error("stain fit error: {0}")]
    StainFit(String),

    /// A metric was requested on degenerate input.
    #[error("metric error: {0}")]
    Metric(String),

    /// An evaluation protocol cannot run on this dataset.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Invalid configuration (unknown parameter name, out-of-range value).
    #[error("config error: {0}")]
    Config(String),

    /// Transfer between checkpoints is impossible (e.g. disjoint gene sets).
    #[error("transfer error: {0}")]
    Transfer(String),

    /// Training aborted (NaN loss, dataset exhausted).
    #[error("training error: {0}")]
    Training(String),

    /// Checkpoint file is malformed.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
