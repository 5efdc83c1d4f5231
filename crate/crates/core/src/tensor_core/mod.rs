//! Dense tensors, parameter vectors and the differentiation engine.

mod finite_diff;
mod graph;
mod params;
mod tensor;

pub use finite_diff::{finite_diff_directional, finite_diff_grad, max_relative_error, DEFAULT_EPS};
pub use graph::{Bindings, Gradients, Graph, NodeId, DISTRIBUTION_TOL, MASK_FILL};
pub use params::{axpy, dot, norm, ParameterSet, Segment};
pub use tensor::{check_distribution_rows, Tensor};

