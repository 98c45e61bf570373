use thiserror::Error;

/// Errors raised by the estimation and analysis routines.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid model or run configuration (bad dimensions, non-PD covariance, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// A model map produced NaN or Inf on a valid input.
    #[error("model evaluation produced a non-finite value at t={t} ({what}) for z={z:?}")]
    ModelEvaluation {
        t: usize,
        what: &'static str,
        z: Vec<f64>,
    },

    /// A Hessian sample contained NaN/Inf.
    #[error("non-finite Hessian at t={t}, trajectory {trajectory}, block {block}")]
    NonFiniteHessian {
        t: usize,
        trajectory: usize,
        block: &'static str,
    },

    /// Matrix could not be made positive definite within the regularization budget.
    #[error("{what} is singular at t={t} (condition number {condition:e})")]
    Singular {
        what: &'static str,
        t: usize,
        condition: f64,
    },

    /// Every particle weight underflowed to zero.
    #[error("particle weights degenerated at t={t}")]
    Degeneracy { t: usize },

    /// Mismatched input shapes.
    #[error("shape mismatch: {0}")]
    Shape(String),
}

pub type Result<T> = std::result::Result<T, Error>;
