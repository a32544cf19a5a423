use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Adjacent singular values too close for a unique top-k subspace.
    #[error("degenerate spectrum: relative gap {gap:.3e} at cut {index} is below {tol:.3e}")]
    DegenerateSpectrum { index: usize, gap: f64, tol: f64 },

    #[error("model assumption violated: {0}")]
    AssumptionViolated(String),

    #[error("point is outside the full-product-rank set")]
    NotInV1,

    #[error("inner-layer product is nonzero; use the curvature-based witness")]
    UseHessianPath,

    #[error("no strict ascent found along the curvature direction")]
    WitnessSearchFailed,

    #[error("instance generation failed after {attempts} attempts: {reason}")]
    GenerationFailed { attempts: usize, reason: String },

    #[error("divergence detected at iteration {iter}: loss is not finite")]
    DivergenceDetected { iter: usize },

    #[error("wrong dimension regime: {0}")]
    WrongRegime(String),

    #[error("layer {0} has no declared inverse")]
    NoDeclaredInverse(String),

    #[error("numerical routine failed: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
