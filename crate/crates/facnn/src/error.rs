//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by tensor ops, model assembly, IO and evaluation.
#[derive(Error, Debug)]
pub enum FaError {
    /// Tensor shapes incompatible with the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A configuration value violates the invariants of a component.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A caller-side contract was violated (e.g. non-scalar loss).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Index outside the valid range.
    #[error("out of bounds: {0}")]
    Bounds(String),

    /// Checkpoint file is malformed or inconsistent.
    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),

    /// Dataset file does not follow the expected binary layout.
    #[error("data format error at byte {offset}: {msg}")]
    DataFormat { offset: u64, msg: String },

    /// Training aborted because the loss left the finite range.
    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FaError>;
