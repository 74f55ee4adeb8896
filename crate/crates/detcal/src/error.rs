//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by calibration metrics, losses, and the toy trainer.
#[derive(Debug, Error)]
pub enum Error {
    /// A metric was asked to evaluate an empty detection set.
    #[error("no detections to calibrate")]
    EmptyInput,

    /// An auxiliary loss was built from a batch with no positive locations.
    #[error("no positive locations")]
    NoPositiveLocations,

    /// Fewer than two MC passes: variance (and hence certainty) is undefined.
    #[error("variance undefined: need at least 2 MC passes, got {0}")]
    TooFewPasses(usize),

    /// A box, score, or logit failed a domain invariant.
    #[error("invalid value: {0}")]
    InvalidValue(String),

    /// A configuration parameter is out of its documented range.
    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    /// A class index exceeds the dataset's class count.
    #[error("class index {label} out of range for {num_classes} classes")]
    ClassOutOfRange { label: usize, num_classes: usize },

    /// Two vectors that must agree in length do not.
    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    /// Temperature fitting needs at least two distinct labels.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Temperature scaling was applied to a detection without stored logits.
    #[error("missing stored logits for temperature scaling")]
    MissingLogits,

    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// JSON (de)serialization failure; serde_json keeps line/column context.
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
