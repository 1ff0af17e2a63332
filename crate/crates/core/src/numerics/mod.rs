//! Minimal reverse-mode autodiff over dense row-major tensors.
//!
//! Exactly the operations the encoder, heads, and losses need, nothing more.
//! Forward evaluation is eager and recorded on a [`Graph`]; [`Graph::backward`]
//! replays the tape in reverse. Every op validates its output for NaN/Inf and
//! aborts the step with a diagnostic if one appears.
//!
//! All reductions run in a fixed index order, so results are bit-reproducible
//! given a seed; internal row/batch parallelism never reassociates a sum.

mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use graph::{Graph, NodeId};
pub use kernels::set_thread_cap;
pub use tensor::{Param, ParamId, ParamStore, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op} at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("{op}: {detail}")]
    Invalid { op: &'static str, detail: String },
}

impl NumericsError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        NumericsError::ShapeMismatch { op, detail: detail.into() }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        NumericsError::Invalid { op, detail: detail.into() }
    }

    /// True when the failure is a NaN/Inf forward value (the divergence signal
    /// the lr-sweep harness looks for).
    pub fn is_non_finite(&self) -> bool {
        matches!(self, NumericsError::NonFinite { .. })
    }
}
