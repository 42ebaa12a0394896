use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("kernel extents must be odd, got {kh}x{kw}")]
    EvenKernel { kh: usize, kw: usize },

    #[error("region is empty")]
    EmptyRegion,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("parse error at byte {offset}: {reason}")]
    Parse { offset: usize, reason: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("missing file {}", path.display())]
    MissingFile { path: PathBuf },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {}: {source}", path.display())]
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

    /// Short machine-parsable category used by the command-line driver.
    pub fn category(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } | Error::InvalidShape { .. } | Error::EvenKernel { .. } => {
                "shape"
            }
            Error::EmptyRegion => "empty-region",
            Error::InvalidArgument(_) => "argument",
            Error::NonFinite(_) => "non-finite",
            Error::Parse { .. } => "parse",
            Error::Dataset(_) | Error::MissingFile { .. } => "dataset",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } => "io",
        }
    }
}
