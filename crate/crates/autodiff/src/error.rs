use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: data length {len} does not match shape {shape:?}")]
    LengthMismatch {
        op: &'static str,
        shape: Vec<usize>,
        len: usize,
    },
    #[error("{op}: shape mismatch, expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{op}: channel mismatch, input has {input} channels but kernel expects {kernel}")]
    ChannelMismatch {
        op: &'static str,
        input: usize,
        kernel: usize,
    },
    #[error("{op}: stride {stride} is not supported (expected 1 or 2)")]
    InvalidStride { op: &'static str, stride: usize },
    #[error("{op}: kernel extents must be odd, got {kh}x{kw}")]
    EvenKernel {
        op: &'static str,
        kh: usize,
        kw: usize,
    },
    #[error("group_norm: {channels} channels are not divisible into {groups} groups")]
    InvalidGroups { channels: usize, groups: usize },
    #[error("{op}: expected a rank-{expected} tensor, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: {message}")]
    Invalid { op: &'static str, message: String },
}
