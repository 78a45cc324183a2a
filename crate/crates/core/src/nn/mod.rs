//! Dense tensor math with reverse-mode differentiation, the AdamW
//! optimizer and learning-rate schedules.
//!
//! Computation is recorded on a [`Graph`] (a tape). Every op appends a
//! node, so node order is already a topological order and the backward
//! pass is a single reverse sweep.

mod gradcheck;
mod graph;
mod optim;
mod schedule;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{cross_entropy, AttentionSpec, Graph, Var};
pub use optim::{adamw_step, clip_grad_norm, AdamWState};
pub use schedule::{lr_at_step, DecayKind, ScheduleSpec};
pub use tensor::{Scalar, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{0}")]
    Domain(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("contract violated: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, NnError>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(NnError::Shape {
        op,
        detail: detail.into(),
    })
}
