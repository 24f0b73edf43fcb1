//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The op set is deliberately small: exactly what the dense networks and
//! the discriminant losses in this crate need.

mod gradcheck;
mod graph;
mod sgd;
mod tensor;

pub use gradcheck::{gradient_check, GradCheckReport};
pub use graph::{softmax_in_place, Gradients, Graph, Var};
pub use sgd::Sgd;
pub use tensor::Tensor;
