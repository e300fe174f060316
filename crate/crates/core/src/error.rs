use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke a documented precondition (shape, support, corrupt sample).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A forward pass produced a NaN or infinity.
    #[error("non-finite value at node {node}")]
    Numerical { node: usize },

    /// Training left the finite region (NaN or parameter magnitude above the guard).
    #[error("diverged at step {step}: {reason}")]
    Divergence { step: usize, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}
