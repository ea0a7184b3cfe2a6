//! Deterministic `f64` tensor arithmetic with reverse-mode gradients and Adam.

mod adam;
mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

use thiserror::Error;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, relative_error, GradCheckReport, REL_ERROR_FLOOR};
pub use graph::{evaluate, gradients, Bindings, Evaluation, Graph, Node, NodeId, Op};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("extents must be positive, got {0:?}")]
    BadShape(Vec<usize>),
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("node {node}: {detail}")]
    Shape { node: usize, detail: String },
    #[error("node {node} ({op}) produced a non-finite value")]
    NonFinite { node: usize, op: &'static str },
    #[error("input node {0} is not bound")]
    Unbound(usize),
    #[error("gradient seed {node} is not scalar (shape {shape:?})")]
    NonScalarSeed { node: usize, shape: Vec<usize> },
    #[error("{0}")]
    Mismatch(String),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGrad(usize),
}
