//! Dense tensors, a define-by-run gradient tape and a finite-difference oracle.

pub mod gradcheck;
pub mod graph;
pub mod tensor;

pub use gradcheck::{finite_diff_grad, max_relative_error, relative_error};
pub use graph::{Gradients, Graph, Mask, Var};
pub use tensor::{Scalar, Tensor};
