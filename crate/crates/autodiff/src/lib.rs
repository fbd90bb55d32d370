//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s; calling
//! [`Tape::backward`] on a scalar walks the tape in reverse and accumulates
//! gradients into the leaves. The op vocabulary is exactly what the lpdet
//! detector needs: convolution, max pooling, ReLU, affine maps, channel L2
//! normalization, bilinear region warping, head reshaping and the fused
//! detection losses. Custom ops implement [`Function`] and are recorded with
//! [`Tape::apply`].
//!
//! The element type is generic over [`Real`]: `f32` for training, `f64` for
//! finite-difference checks (see [`gradcheck`]).

pub mod checkpoint;
mod error;
pub mod gradcheck;
mod ops;
mod real;
mod tape;
mod tensor;

pub use checkpoint::{CheckpointError, ParamStore, CHECKPOINT_VERSION};
pub use error::{Result, TensorError};
pub use ops::{sigmoid, smooth_l1_derivative, smooth_l1_value, WarpRegion, L2NORM_EPS};
pub use real::{matmul, Real};
pub use tape::{BackwardContext, Function, Tape, Var};
pub use tensor::{numel, Tensor};

/// Numeric precision of an engine instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    /// 32-bit, used for training and inference.
    #[default]
    F32,
    /// 64-bit, used for gradient checking.
    F64,
}

impl std::str::FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "f32" | "32" => Ok(Self::F32),
            "f64" | "64" => Ok(Self::F64),
            other => Err(format!("unknown precision {other:?}")),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::F32 => "f32",
            Self::F64 => "f64",
        })
    }
}
