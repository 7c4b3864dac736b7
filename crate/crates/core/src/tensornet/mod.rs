//! A small CPU tensor engine with tape-based reverse-mode differentiation,
//! the layers the segmentation network needs, and the network itself.
//!
//! Tensors are generic over [`Scalar`] so the same code runs in `f32` for
//! training and in `f64` for finite-difference gradient checks.

mod graph;
mod kernels;
mod layers;
mod params;
mod tensor;
mod unet;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};

use num_traits::Float;
use thiserror::Error;

pub use graph::{Gradients, Graph, Var};
pub(crate) use graph::bce_value;
pub use layers::{
    aspp, attention_gate, conv2d, max_pool2, transposed_conv2d, AsppParams, AsppVars, AttentionGateParams, GateVars,
};
pub use params::{Param, ParamStore};
pub use tensor::Tensor;
pub use unet::{build_unet, dropout_mask, Mode, UNet, UNetConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("max-pool needs even spatial dims, got {h}x{w}")]
    OddDimension { h: usize, w: usize },
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("no recorded graph for this variable")]
    NoRecordedGraph,
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("duplicate parameter {0}")]
    DuplicateParam(String),
}

pub type Result<T> = std::result::Result<T, NetError>;

/// Floating-point element type.
pub trait Scalar:
    Float + Default + Debug + Display + Sum + AddAssign + MulAssign + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}
