//! Dense tensors, reverse-mode differentiation and the Adam optimizer.

mod adam;
mod gradcheck;
mod graph;
mod real;
mod tensor;

pub use adam::Adam;
pub use gradcheck::finite_difference_error;
pub use graph::{AttnMask, Gradients, Graph, Var};
pub use real::Real;
pub use tensor::Tensor;
