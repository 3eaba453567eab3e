//! Minimal reverse-mode automatic differentiation over [`Tensor`](crate::Tensor).

pub mod conv;
mod graph;

pub use graph::{sigmoid, Gradients, Graph, Var};
