//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by data loading, model construction, and persistence.
#[derive(Debug, Error)]
pub enum Error {
    /// Underlying I/O failure (file missing, short read, ...).
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// An IDX file or checkpoint did not match the expected binary layout.
    #[error("malformed {what}: {detail}")]
    Malformed { what: &'static str, detail: String },

    /// A configuration value or spec string could not be interpreted.
    #[error("invalid config: {0}")]
    Config(String),

    /// Shapes or sizes handed to an operation are inconsistent.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A checkpoint was produced by an incompatible format version.
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    /// The clean input activates no object capsule above the mean, so the
    /// attack target set is empty and the attack cannot be formulated.
    #[error("no object capsule exceeds the mean presence on the clean input")]
    NoActiveCapsule,
}

impl Error {
    pub(crate) fn malformed(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Malformed {
            what,
            detail: detail.into(),
        }
    }
}

/// Convenience alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;
