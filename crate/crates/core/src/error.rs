use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CulError>;

#[derive(Debug, Error)]
pub enum CulError {
    #[error("invalid parameter {name}: {reason}")]
    InvalidParams { name: &'static str, reason: String },

    #[error("plant state left the finite range at step {step}")]
    NonFinite { step: usize },

    #[error("non-finite value in {0}")]
    NonFiniteValue(&'static str),

    #[error("stage {stage} out of range (0..={max})")]
    StageOutOfRange { stage: usize, max: usize },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("Riccati iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("closed loop is not stable (spectral radius {0})")]
    UnstableClosedLoop(f64),

    #[error("replay buffer holds {have} transitions, need {need}")]
    BufferUnderfull { have: usize, need: usize },

    #[error("record is incomplete: {0}")]
    IncompleteRecord(String),

    #[error("unknown case {0:?}")]
    UnknownCase(String),

    #[error("unknown case key {0:?}")]
    UnknownCaseKey(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CulError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CulError::Io {
            path: path.into(),
            source,
        }
    }
}
