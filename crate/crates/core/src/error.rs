//! Error type shared across the crate.
//!
//! Construction errors (bad shapes, non-simplex rows, invalid parameters)
//! are reported eagerly by constructors; numeric failures (divergence,
//! non-finite losses) are reported by the operation that detected them.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    /// Mismatched table shapes or index out of range.
    #[error("shape error: {0}")]
    Shape(String),

    /// A value violates its domain (probabilities, discounts, masses, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// KL divergence undefined: the evaluated policy puts mass where the
    /// reference policy has none.
    #[error("divergence error: {0}")]
    Divergence(String),

    /// Physics or model integration produced a non-finite state.
    #[error("physics error: {0}")]
    Physics(String),

    /// A training step produced a non-finite loss or parameter.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Refused to fit a model on degenerate data.
    #[error("data error: {0}")]
    Data(String),

    /// Configuration rejected before any work started.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
