use std::io;

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("channel count {channels} is not divisible by group count {groups}")]
    IndivisibleChannels { channels: usize, groups: usize },

    #[error("invalid shape {0:?}: every dimension must be positive")]
    InvalidShape([usize; 4]),

    #[error("data length {found} does not match shape volume {expected}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("non-finite value at flat index {index}")]
    NonFiniteInput { index: usize },

    #[error("{what} index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: [usize; 4],
        found: [usize; 4],
    },

    #[error("forward cache does not match the gradient: {0}")]
    StaleCache(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("layer {index} ({layer}) is incompatible with its input: {detail}")]
    ShapeIncompatible {
        index: usize,
        layer: String,
        detail: String,
    },

    #[error("loss became non-finite ({loss}) at epoch {epoch}, step {step}")]
    DivergedLoss { epoch: usize, step: usize, loss: f64 },

    #[error("layer {0} is not an SGE layer")]
    LayerNotFound(usize),

    #[error("histogram needs at least 2 bins, got {0}")]
    BadBinCount(usize),

    #[error("bad magic bytes at offset {offset}")]
    BadMagic { offset: usize },

    #[error("unsupported version {found} at offset {offset}")]
    BadVersion { offset: usize, found: u16 },

    #[error("header truncated at byte offset {offset}")]
    TruncatedHeader { offset: usize },

    #[error("payload truncated at byte offset {offset} (needed {needed} more bytes)")]
    TruncatedPayload { offset: usize, needed: usize },

    #[error("unexpected trailing bytes at offset {offset}")]
    TrailingBytes { offset: usize },

    #[error("malformed checkpoint at offset {offset}: {reason}")]
    MalformedCheckpoint { offset: usize, reason: String },

    #[error("heatmap value {value} at index {index} is outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
