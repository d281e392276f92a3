//! Error types shared across the crate.

use std::path::PathBuf;
use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by the mosaicing pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or image shapes do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Geometry that cannot be solved: collinear points, singular transforms.
    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    /// A numeric argument fell outside its declared range.
    #[error("out of range: {0}")]
    Range(String),

    /// Non-finite values or other numeric breakdown.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Training produced a non-finite loss.
    #[error("training diverged: non-finite loss at epoch {epoch}, iteration {iteration}")]
    Diverged { epoch: usize, iteration: usize },

    /// Two registered images share no overlap pixels.
    #[error("empty overlap between images")]
    EmptyOverlap,

    /// A file failed to parse: bad magic, version, truncation, malformed CSV.
    #[error("format error: {0}")]
    Format(String),

    /// Underlying I/O failure, tagged with the offending path.
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code class: 3 for numeric failures, 2 for data errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) | Error::Diverged { .. } => 3,
            _ => 2,
        }
    }
}
