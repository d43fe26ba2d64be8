//! Dense 64-bit tensors with tape-based reverse-mode differentiation, the Adam
//! optimizer, finite-difference gradient checking, and the checkpoint format.
//!
//! Every reduction sums in a fixed index order, so identical inputs give
//! bit-identical outputs.

mod adam;
pub mod checkpoint;
mod gradcheck;
mod graph;
mod tensor;

use thiserror::Error;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, grad_check_coords, roundoff_floor, GradCheckReport, DEFAULT_FLOOR};
pub use graph::{Gradients, Graph, Var};
pub(crate) use graph::softplus;
pub use tensor::{ParamId, ParamStore, Parameter, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum NumError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("index {index} out of range for table of {size} rows")]
    Index { index: usize, size: usize },
    #[error("{0}: no inputs")]
    Empty(&'static str),
    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),
    #[error("optimizer: {0}")]
    Optimizer(String),
}
