//! Crate-wide error type.
//!
//! Every fallible operation in this crate returns [`NovaError`]. The variants
//! map onto the process exit codes used by the CLI: configuration and
//! rejected-input problems are caller mistakes, internal-state errors mean an
//! engine invariant broke mid-run.

use std::fmt;

/// Errors produced by the generation engine and its submodules.
#[derive(Debug, Clone, PartialEq)]
pub enum NovaError {
    /// A configuration value violates its invariant. Carries the field name.
    Config { field: String, message: String },
    /// An input value was rejected (dimension mismatch, non-normalized
    /// distribution, out-of-range index).
    InvalidInput(String),
    /// An API was called out of sequence (e.g. appending trace scales out of
    /// order, or asking for a ratio before activation).
    Usage(String),
    /// Preceding-layer mean entropy was not positive, so the layer-linkage
    /// deviation is undefined. The engine falls back to the base ratio.
    DegenerateEntropy(String),
    /// An engine invariant broke mid-run. Always a bug, never user error.
    Internal(String),
}

impl NovaError {
    pub(crate) fn config(field: &str, message: impl Into<String>) -> Self {
        NovaError::Config {
            field: field.to_string(),
            message: message.into(),
        }
    }
}

impl fmt::Display for NovaError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NovaError::Config { field, message } => {
                write!(f, "invalid configuration: {field}: {message}")
            }
            NovaError::InvalidInput(msg) => write!(f, "rejected input: {msg}"),
            NovaError::Usage(msg) => write!(f, "usage error: {msg}"),
            NovaError::DegenerateEntropy(msg) => write!(f, "degenerate entropy: {msg}"),
            NovaError::Internal(msg) => write!(f, "internal state error: {msg}"),
        }
    }
}

impl std::error::Error for NovaError {}

pub type Result<T> = std::result::Result<T, NovaError>;
