//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible shapes between stacks, masks, or factor matrices.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Inputs that violate a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Hyperparameters or tolerances outside their legal range.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A normal-equation system with no usable solution (rank deficiency
    /// with zero regularization). Surfaced, never silently regularized.
    #[error("singular system: {0}")]
    SingularSystem(String),

    /// Non-finite loss or iterates; the run diverged.
    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    /// No run in a multi-start set was both feasible and non-degenerate.
    #[error("no feasible, non-degenerate run")]
    NoFeasibleRun,

    /// Synthetic generation could not satisfy its screening rules within
    /// the retry budget (congruence cap, fiber constraints).
    #[error("generation failed: {0}")]
    GenerationFailed(String),

    /// Malformed or inconsistent on-disk bundle.
    #[error("invalid bundle: {0}")]
    InvalidBundle(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
