//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Every operation records a node when at least one input is tracked. The
//! vector-Jacobian product of each operation is itself written in terms of
//! tracked operations, so a backward pass run with `create_graph` produces
//! gradients that can be differentiated again. That is what makes it possible
//! to differentiate a loss evaluated at parameters produced by a gradient step.

mod backward;
mod kernels;
mod ops;
mod params;
mod tensor;

pub use backward::{backward, backward_through_update, backward_with, grad, BackwardOptions, UpdateOrder};
pub use params::{FlatParams, ParamSet};
pub use tensor::{Conv2dSpec, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("graph already consumed by an earlier backward pass without retention")]
    GraphConsumed,
    #[error("loss does not depend on an inner update step of the given parameters")]
    InnerStepNotRecorded,
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;
