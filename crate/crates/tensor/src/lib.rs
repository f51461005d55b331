//! Minimal dense tensors with tape-based reverse-mode differentiation.
//!
//! Everything is generic over [`Scalar`] (`f32` for training, `f64` for
//! gradient checks). Matrix products go through `matrixmultiply`.

mod attention;
mod conv;
mod error;
pub mod gradcheck;
mod graph;
pub mod linalg;
mod norm;
pub mod optim;
mod scalar;
mod tensor;

pub use attention::attention_weights;
pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, Var};
pub use norm::NORM_EPS;
pub use optim::{AdamW, AdamWConfig, Moments};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
