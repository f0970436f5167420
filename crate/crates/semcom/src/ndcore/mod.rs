//! Dense f64 tensors and a small reverse-mode autodiff tape.

pub mod gradcheck;
pub mod graph;
pub mod tensor;

pub use gradcheck::{central_differences, grad_check, max_relative_error, GradCheckReport};
pub use graph::{Graph, NodeId, EPS};
pub use tensor::Tensor;
