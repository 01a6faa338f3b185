//! Error type shared by all core modules.

use alloc::string::String;
use thiserror::Error;

/// Errors surfaced by core operations.
///
/// IO and parse failures live in the `ctraj` companion crate; everything in
/// the core is a pure function of its inputs, so the variants here describe
/// bad inputs or numerical breakdown, not the environment.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum CoreError {
    /// A value violates a documented invariant; the message names the field.
    #[error("validation error: {0}")]
    Validation(String),
    /// A configuration value is out of range or inconsistent.
    #[error("config error: {0}")]
    Config(String),
    /// An argument is outside an operation's domain.
    #[error("domain error: {0}")]
    Domain(String),
    /// An operation was called in a state it does not support.
    #[error("usage error: {0}")]
    Usage(String),
    /// A forward pass produced NaN or infinity.
    #[error("numerical error: {0}")]
    Numerical(String),
    /// An encoder cannot produce tokens for the given input.
    #[error("encoding error: {0}")]
    Encoding(String),
    /// Attention received an empty or fully masked key set.
    #[error("attention error: {0}")]
    Attention(String),
}

impl CoreError {
    pub fn validation(msg: impl Into<String>) -> Self {
        CoreError::Validation(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        CoreError::Config(msg.into())
    }
    pub fn domain(msg: impl Into<String>) -> Self {
        CoreError::Domain(msg.into())
    }
    pub fn usage(msg: impl Into<String>) -> Self {
        CoreError::Usage(msg.into())
    }
    pub fn numerical(msg: impl Into<String>) -> Self {
        CoreError::Numerical(msg.into())
    }
}
