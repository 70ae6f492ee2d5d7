//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer shapes do not compose.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Invalid configuration (ranges, missing models, degenerate sizes).
    #[error("configuration error: {0}")]
    Config(String),

    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Training(String),

    /// Filesystem failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Image decode/encode failure.
    #[error("image error: {0}")]
    Image(String),

    /// Model file is malformed or has an unsupported version.
    #[error("model file error: {0}")]
    ModelFile(String),

    /// Remote agent backend failed (transport, schema, or validation).
    #[error("remote backend error: {0}")]
    Remote(String),
}

pub type Result<T> = std::result::Result<T, Error>;
