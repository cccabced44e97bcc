use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("invalid shape for {op}: {shape:?} ({reason})")]
    InvalidShape { op: &'static str, shape: Vec<usize>, reason: String },

    #[error("invalid axis {axis} for shape {shape:?}")]
    InvalidAxis { axis: usize, shape: Vec<usize> },

    #[error("domain error in {op}: {reason}")]
    Domain { op: &'static str, reason: String },

    #[error("numerical degeneracy: {0}")]
    Degenerate(String),

    #[error("singular matrix: |det| = {det:e}")]
    Singular { det: f64 },

    #[error("layer used before data-dependent initialization: {0}")]
    Uninitialized(String),

    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),

    #[error("non-finite loss at step {step}; last good checkpoint: {last_checkpoint:?}")]
    NonFiniteLoss { step: u64, last_checkpoint: Option<PathBuf> },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed image {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] crate::training::checkpoint::CheckpointError),

    #[error("dataset overlap: {count} image(s) appear in both the prior and denoiser sets (e.g. {example})")]
    ManifestOverlap { count: usize, example: PathBuf },

    #[error("empty input: {0}")]
    Empty(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Short machine-readable tag used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } | Error::InvalidShape { .. } | Error::InvalidAxis { .. } => "shape",
            Error::Domain { .. } => "domain",
            Error::Degenerate(_) | Error::Singular { .. } => "numeric",
            Error::Uninitialized(_) => "uninitialized",
            Error::NonFiniteGradient(_) | Error::NonFiniteLoss { .. } => "non-finite",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Checkpoint(_) => "checkpoint",
            Error::ManifestOverlap { .. } => "overlap",
            Error::Empty(_) => "empty",
        }
    }
}
