//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! Graphs are built per batch (define-by-run); model parameters live in a
//! [`ParamStore`] and are bound into each new graph as named leaves.

mod finite_diff;
mod graph;
mod params;
mod tensor;

pub use finite_diff::{finite_diff_grad, relative_error};
pub use graph::{Gradients, Graph, NodeId};
pub use params::{accumulate, Adam, AdamConfig, Bound, GradMap, ParamStore};
pub use tensor::{ordered_sum, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("graph input `{0}` is not bound")]
    UnboundInput(String),
    #[error("unknown node name `{0}`")]
    UnknownName(String),
    #[error("name `{0}` already used in this graph")]
    DuplicateName(String),
    #[error("seed shape {got:?} does not match output shape {expected:?}")]
    SeedShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("non-finite function value while probing coordinate {0}")]
    NonFiniteProbe(usize),
}

#[cfg(test)]
mod tests;
