//! Deterministic reverse-mode differentiation over a fixed operation set.
//!
//! A [`Graph`] is built node by node; every builder call checks the operation's
//! shape rule, so a constructed graph is always well-typed. Values are computed
//! by [`Graph::evaluate`] against named leaf bindings and gradients by
//! [`Graph::backward`]. Both take `&self`: a graph is never mutated by running it.

mod fd;
mod graph;
mod kernels;

pub use fd::{finite_difference_gradient, gradient_check, relative_error};
pub use graph::{Evaluation, Gradients, Graph, NodeId, Op, TensorMap};
