//! Minimal tensor engine for volumetric convolutional networks.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`); the aliases at the
//! bottom of this file name the two concrete instantiations.

pub mod conv;
pub mod graph;
mod params;
mod scalar;
mod tensor;

pub use conv::ConvSpec;
pub use graph::{upsample_nearest, Graph, Var};
pub use params::{Gradients, Param, ParamId, ParamStore};
pub use scalar::{gemm, MatLayout, Scalar};
pub use tensor::{Shape5, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
