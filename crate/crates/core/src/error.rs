//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by graph ingestion, matrix kernels, model construction
/// and inference.
#[derive(Debug, Error)]
pub enum Error {
    /// A text input could not be parsed. Carries the 1-based line number.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Structurally invalid input (bad ids, self-loops, mismatched files).
    #[error("validation error: {0}")]
    Validation(String),

    /// A parameter value outside its mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Hyperparameter vector that does not define a valid model
    /// (non-PD between-variable matrix, singular loadings). Inference
    /// treats this as a rejected point, not a failure.
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparameters(String),

    /// Cholesky failed and the jitter policy was disabled or exhausted.
    #[error("matrix not positive definite (last jitter tried: {jitter_tried:e})")]
    NotPositiveDefinite { jitter_tried: f64 },

    /// The constraint system A Q^{-1} A^T is singular.
    #[error("constraint degeneracy: {0}")]
    ConstraintDegeneracy(String),

    /// Operands with incompatible shapes.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// Numerically divergent state (e.g. linear predictor overflow).
    #[error("invalid state: {0}")]
    InvalidState(String),

    /// Optimizer could not find any valid point.
    #[error("optimization failure: {0}")]
    OptimizationFailure(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
