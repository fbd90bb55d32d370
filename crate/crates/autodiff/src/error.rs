use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("conv2d: input has {input} channels but weights expect {weight}")]
    ChannelMismatch { input: usize, weight: usize },
    #[error("{op}: stride must be positive")]
    InvalidStride { op: &'static str },
    #[error("maxpool2d: window {window} larger than input {height}x{width}")]
    WindowTooLarge {
        window: usize,
        height: usize,
        width: usize,
    },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward: graph already differentiated; reset gradients first")]
    BackwardTwice,
    #[error("backward: node {node} consumes later node {input} (cycle)")]
    CyclicGraph { node: usize, input: usize },
    #[error("{op}: empty selection")]
    EmptySelection { op: &'static str },
    #[error("roi_warp: region {index} has non-positive area")]
    InvalidRegion { index: usize },
    #[error("variable belongs to a different tape")]
    ForeignVar,
}

pub type Result<T> = std::result::Result<T, TensorError>;
