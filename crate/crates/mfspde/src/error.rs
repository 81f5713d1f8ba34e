//! Error types shared across the solver library.

use thiserror::Error;

/// Errors raised by the numerical layers (grid, noise, solvers, control).
///
/// Configuration-file problems have their own type ([`crate::config::ConfigError`])
/// so the CLI can map the two classes to distinct exit codes.
#[derive(Error, Debug)]
pub enum SolverError {
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("empty ensemble passed to {0}")]
    EmptyEnsemble(&'static str),

    #[error("non-finite value produced by {what} at t={t}, x={x}")]
    NonFinite { what: &'static str, t: f64, x: f64 },

    #[error("singular tridiagonal solve: pivot {pivot:e} at row {row}")]
    SingularSolve { row: usize, pivot: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("inadmissible perturbation: {0}")]
    InadmissiblePerturbation(String),

    #[error(
        "positivity floor engaged on fraction {fraction:.4} of samples (limit {limit:.4}); \
         state is effectively absorbed at the floor"
    )]
    PositivityViolation { fraction: f64, limit: f64 },

    #[error("i/o failure writing {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, SolverError>;
