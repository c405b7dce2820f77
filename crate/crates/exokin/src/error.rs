use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("invalid quaternion: |norm - 1| = {defect:.3e} exceeds 1e-6")]
    QuaternionNorm { defect: f64 },

    #[error("rotation angle {angle:.6} rad is within 1e-6 of pi; principal log is ambiguous")]
    LogBranchAmbiguity { angle: f64 },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("link index {index} out of range for {dof}-dof chain")]
    LinkIndexOutOfRange { index: usize, dof: usize },

    #[error("unknown marker id {0}")]
    UnknownMarker(u32),

    #[error("base marker not observed; link poses cannot be expressed in the robot frame")]
    BaseUnobserved,

    #[error("no links visible; joint state is unobservable")]
    Unobservable,

    #[error("non-finite cost at iteration {iteration}")]
    NumericalFailure {
        iteration: usize,
        /// Last iterate with finite cost, for diagnostics.
        last_iterate: Vec<f64>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
