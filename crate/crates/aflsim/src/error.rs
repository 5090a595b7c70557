//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input width, batch length or label count does not match the network.
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    /// Two parameter vectors with different layer layouts were combined.
    #[error("parameter layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    /// Replay sampling was requested before the buffer held enough tuples.
    #[error("replay buffer holds {have} transitions, {want} requested")]
    BufferUnderfilled { have: usize, want: usize },

    #[error("vehicle sits exactly at the antenna; uplink direction undefined")]
    DegenerateGeometry,

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// IDX container carried an unexpected magic number.
    #[error("bad IDX magic 0x{found:08x}, expected 0x{expected:08x}")]
    IdxMagic { found: u32, expected: u32 },

    #[error("truncated IDX file: need {need} bytes, have {have}")]
    IdxTruncated { need: usize, have: usize },

    #[error("IDX image/label count mismatch: {images} images vs {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },

    #[error("dataset pool of {pool} samples cannot cover requested sizes summing to {requested}")]
    PoolTooSmall { pool: usize, requested: usize },

    #[error("checkpoint does not match config: {0}")]
    CheckpointMismatch(String),

    #[error("malformed checkpoint: {0}")]
    CheckpointFormat(String),

    #[error("metrics parse error: {0}")]
    MetricsParse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
