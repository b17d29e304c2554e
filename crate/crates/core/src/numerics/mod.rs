//! Dense tensors, reverse-mode autodiff and the neural layers built on them.

pub mod functional;
pub mod gradcheck;
mod graph;
pub mod kernels;
pub mod layers;
mod params;
mod tensor;

pub use functional::{dot_attention, log_softmax, softmax};
pub use graph::{Graph, NodeGrads, NodeId};
pub use layers::{Embedding, Linear, LstmCell, LstmRun};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::Tensor;

#[cfg(test)]
mod gradient_tests;
