//! Error type shared across the crate.

use crate::noise::NoiseKind;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A numeric input or intermediate that must be finite was not.
    #[error("{what} must be finite, got {value}")]
    NonFinite { what: &'static str, value: f64 },

    /// A numeric input that must be strictly positive was not.
    #[error("{what} must be > 0, got {value}")]
    NonPositive { what: &'static str, value: f64 },

    /// Operation not defined for this noise family.
    #[error("{what} is not available for {kind:?} noise")]
    Unsupported { what: &'static str, kind: NoiseKind },

    /// A class index outside `0..num_classes`.
    #[error("class index {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },

    /// A subsampled class set that violates its contract.
    #[error("invalid class sample: {detail}")]
    InvalidClassSample { detail: String },

    /// Mismatched lengths or dimensions between two coupled arguments.
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    /// Catch-all for violated argument contracts.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Adaptive quadrature failed to reach its tolerance.
    #[error("quadrature did not converge: {0}")]
    QuadratureFailed(String),

    /// Training produced non-finite parameters or bound estimates.
    #[error("training diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: u64, detail: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Text dataset parse failure with its location.
    #[error("parse error at {path}:{line}: {detail}")]
    Parse {
        path: String,
        line: usize,
        detail: String,
    },

    /// Malformed or incompatible binary model file.
    #[error("bad model file: {0}")]
    ModelFormat(String),
}
