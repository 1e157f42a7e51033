//! Dense tensors and a reverse-mode tape.
//!
//! Every op is recorded on a [`Graph`] as it executes; [`Graph::backward`]
//! walks the tape once in reverse and leaves gradients on the leaves created
//! with [`Graph::param`].

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{Graph, Var};
pub use tensor::Tensor;
