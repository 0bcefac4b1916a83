//! Dense tensors and a reverse-mode tape covering the layer set of
//! VGG-style networks, including gradients with respect to multiplicative
//! mask variables.

mod graph;
pub mod kernels;
mod scalar;
mod tensor;

pub use graph::{BatchStats, Counters, Graph, Mode, NodeId};
pub use scalar::{gemm, MatRef, Real};
pub use tensor::Tensor;
