use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("repeller singularity: anchors {a} and {b} coincide inside the margin")]
    RepellerSingularity { a: usize, b: usize },

    #[error("embedding dimension too small for base-vector initialization ({classes} classes, dimension {dim})")]
    DimensionTooSmall { classes: usize, dim: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("undefined AP: no relevant items")]
    UndefinedAp,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("stale tape: {0}")]
    StaleTape(String),

    #[error("infeasible blob layout: no centers {separation} apart after {rounds} rejection rounds")]
    InfeasibleSeparation { separation: f64, rounds: usize },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unrecognized file: {0}")]
    UnrecognizedFile(String),

    #[error("truncated payload: {0}")]
    Truncated(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dims(expected: usize, got: usize) -> Self {
        Error::DimensionMismatch { expected, got }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
