//! Reverse-mode automatic differentiation on dense CPU tensors.
//!
//! A [`Graph`] records operations eagerly; [`Graph::backward`] walks the
//! tape in reverse. Models own their weights as named [`Param`]s and load
//! them onto a fresh graph for each forward pass, so parameter gradients
//! come back keyed by name and can be filtered by prefix for partial
//! (frozen) training.
//!
//! Every kernel is generic over [`Scalar`], implemented for `f32` (training)
//! and `f64` (gradient checks).

pub mod error;
pub mod graph;
pub mod kernels;
pub mod nn;
pub mod optim;
pub mod param;
pub mod scalar;
pub mod tensor;

pub use error::{Result, TensorError};
pub use graph::{sigmoid, Gradients, Graph, ParamGrad, Var};
pub use param::{Module, Param};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
