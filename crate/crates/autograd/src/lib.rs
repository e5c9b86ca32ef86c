//! Small reverse-mode automatic differentiation engine over dense tensors.
//!
//! Every backward rule is written in terms of graph operations, so the
//! gradients returned by [`Graph::grad`] are themselves nodes of the graph
//! and can be differentiated again. This is what allows a loss computed
//! after several gradient-descent steps on an inner objective to be
//! differentiated with respect to the parameters of that objective.

mod float;
mod graph;
mod kernels;
mod tensor;

pub use float::Float;
pub use graph::{Graph, Var};
pub use tensor::Tensor;
