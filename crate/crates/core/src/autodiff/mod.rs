//! A small reverse-mode automatic differentiation tape over dense `f64`
//! tensors, with fused operations for the geometric product layers and the
//! eigendecomposition of the metric.

mod param;
mod tape;
mod tensor;

use thiserror::Error;

use crate::metric::MetricError;

pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;


#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("shape {shape:?} does not match {len} values")]
    BadShape { shape: Vec<usize>, len: usize },
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: unsupported shape {shape:?}")]
    Rank { op: &'static str, shape: Vec<usize> },
    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },
    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },
    #[error("concat needs at least one input")]
    EmptyConcat,
    #[error("loss must have exactly one element, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;
