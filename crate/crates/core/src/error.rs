use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("batch statistics requested over an empty batch")]
    EmptyBatch,

    #[error("loss is not connected to any recorded operation")]
    DisconnectedGraph,

    #[error("missing statistics: {0}")]
    MissingStats(String),

    #[error("degenerate variance in channel {channel}")]
    DegenerateVariance { channel: usize },

    #[error("gamma is zero in layer {layer}, channel {channel}")]
    ZeroGamma { layer: usize, channel: usize },

    #[error("mode error: {0}")]
    Mode(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("non-finite gradient")]
    NonFiniteGradient,

    #[error("invalid corruption severity {0} (expected 1..=5)")]
    InvalidSeverity(u8),

    #[error("bad magic number in {path}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("truncated file {0}")]
    TruncatedFile(PathBuf),

    #[error("malformed container: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}
