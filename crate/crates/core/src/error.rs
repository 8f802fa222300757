use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// ζ ≥ 1 means two real poles and no overshoot; only the underdamped regime is modelled.
    #[error("overdamped or critically damped system excluded (zeta = {zeta}); only 0 < zeta < 1 is supported")]
    OverdampedExcluded { zeta: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("sequence too short: have {len} samples, need at least {required}")]
    SequenceTooShort { len: usize, required: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("empty selection: {0}")]
    EmptySelection(String),

    #[error("corrupt container {path:?}: {reason}")]
    CorruptContainer { path: PathBuf, reason: String },

    #[error("model spec mismatch: {0}")]
    SpecMismatch(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error("missing trajectory file {0:?}")]
    MissingTrajectory(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
