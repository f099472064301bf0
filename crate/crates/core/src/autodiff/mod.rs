//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation as it is evaluated. Leaves are either
//! trainable parameters or constants; [`Graph::backward`] walks the recorded
//! nodes in reverse and fills in the gradient of a scalar root for every node
//! that depends on a parameter.
//!
//! ```
//! use airex::autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::row(&[1.0, -2.0, 3.0]));
//! let sq = g.hadamard(x, x).unwrap();
//! let root = g.sum(sq);
//! g.backward(root).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0, 6.0]);
//! ```

mod check;
mod graph;
mod tensor;

pub use check::{finite_diff_check, value_and_grad, GradCheck, REL_ERROR_FLOOR};
pub use graph::{sigmoid, softmax, xlogx, Graph, Node, Op, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
