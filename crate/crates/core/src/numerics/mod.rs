//! Dense `f64` tensors, the primitive kernels the attention stages are built
//! from, and reverse-mode differentiation over those primitives.

mod finite_diff;
pub mod graph;
pub mod ops;
mod tensor;

pub use finite_diff::finite_difference;
pub use graph::{Gradients, Graph, NodeId};
pub use ops::{
    avg_pool_rows, conv1d_reflect, cross_entropy, gaussian_kernel, layer_norm, matmul, softmax,
    DEFAULT_LN_EPS,
};
pub use tensor::Tensor;
