//! Dense tensors, a define-by-run graph with reverse-mode gradients, a
//! finite-difference checker and the Adam optimizer.

mod check;
mod graph;
mod kernels;
mod optim;
mod tensor;

pub use check::{fd_check, fd_check_many};
pub use graph::{Gradients, Graph, Op, Var, NORM_EPS};
pub use optim::{Adam, AdamConfig};
pub use tensor::Tensor;
