//! Tape-based reverse-mode autodiff over `ndarray` tensors.
//!
//! The backward pass emits ordinary tape ops for every vector-Jacobian
//! product, so gradients are themselves differentiable expressions and
//! nested [`Graph::grad`] calls produce higher-order derivatives. This is
//! the property the bilevel distillation objective relies on: the inner
//! SGD unroll computes per-step gradients *on the tape*, and the outer
//! loss is then differentiated through them.

mod check;
mod graph;
pub mod kernels;

pub use check::{max_rel_err, numeric_grad};
pub use graph::{Graph, Var};
