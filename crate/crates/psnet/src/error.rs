use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the psnet library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{axis} ({size}) is not divisible by {divisor}")]
    NotDivisible {
        axis: &'static str,
        size: usize,
        divisor: usize,
    },

    #[error("unknown {kind} '{name}' (known: {known:?})")]
    UnknownName {
        kind: &'static str,
        name: String,
        known: Vec<&'static str>,
    },

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint config incompatible: {0}")]
    CheckpointIncompatible(String),

    #[error("non-finite loss term '{term}' at step {step}{}", match .last_good { Some(p) => format!(" (last good checkpoint: {})", p.display()), None => String::new() })]
    NonFiniteLoss {
        term: String,
        step: usize,
        last_good: Option<PathBuf>,
    },

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
