use std::path::PathBuf;

use crate::trainer::LossBreakdown;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid attention mask: row {row} has no unmasked position")]
    InvalidMask { row: usize },

    #[error("non-finite value encountered: {0}")]
    Numeric(String),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("negative sampling failed: {0}")]
    Sampling(String),

    #[error("latent index {z} out of range for K = {k}")]
    LatentRange { z: usize, k: usize },

    #[error("sequence too long: {0}")]
    Length(String),

    #[error("training diverged at step {step}: {breakdown:?}")]
    Divergence { step: u64, breakdown: LossBreakdown },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("selection error: {0}")]
    Selection(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Stream(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 usage, 2 data, 3 numeric/divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Numeric(_) | Error::Divergence { .. } => 3,
            _ => 2,
        }
    }
}
