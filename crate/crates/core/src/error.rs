//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by geometry, network, training, and I/O operations.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty point cloud")]
    EmptyCloud,

    #[error("insufficient points: need {needed}, have {available}")]
    InsufficientPoints { needed: usize, available: usize },

    #[error("non-finite coordinate at point {index}")]
    NonFinitePoint { index: usize },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("non-finite activation in layer {layer}")]
    NonFiniteLayer { layer: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("degenerate gradient (norm below {eps:e})")]
    DegenerateGradient { eps: f64 },

    #[error("training diverged at step {step}")]
    Divergence { step: usize },

    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
