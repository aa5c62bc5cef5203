//! Minimal dense tensors with reverse-mode gradients, sized for the encoder
//! and decoders. All arithmetic is f64.

mod gradcheck;
mod graph;
mod params;
mod tensor;

use thiserror::Error;

pub use gradcheck::{grad_check, grad_check_params, GradCheckConfig, GradCheckReport, GradFailure};
pub use graph::{log_sigmoid, Gradients, Graph, Var, LAYER_NORM_EPS};
pub(crate) use graph::softmax_in_place;
pub use params::{ParamGrads, ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    ShapeMismatch {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("shape {shape:?} does not hold {len} elements (rank <= 3)")]
    BadShape { shape: Vec<usize>, len: usize },
    #[error("{op}: index {index} out of range for {len} rows")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("backward needs a scalar output, got shape {0:?}")]
    NonScalar(Vec<usize>),
    #[error("graph has no parameter store")]
    NoParamStore,
    #[error("unknown parameter {0}")]
    UnknownParam(usize),
}
