//! Crate-wide error type.

use thiserror::Error;

/// Anything that can go wrong building vocabularies, rendering instructions,
/// running models, or reading datasets and checkpoints.
#[derive(Debug, Error)]
pub enum Error {
    #[error("vocabulary error: {0}")]
    Vocab(String),

    #[error("instruction error: {0}")]
    Instruction(String),

    #[error("coordinate codec error: {0}")]
    Coord(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

/// Convenience alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;
