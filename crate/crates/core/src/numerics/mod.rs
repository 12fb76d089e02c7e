//! Tensor algebra with reverse-mode differentiation, seeded random streams,
//! the Adam optimizer and the tensor container file format.

mod adam;
mod container;
mod elementwise;
mod gradcheck;
mod layout;
mod linalg;
mod params;
mod reduce;
mod rng;
mod tensor;

pub use adam::AdamState;
pub use container::{NamedTensor, TensorFile, FORMAT_VERSION as TENSOR_FILE_VERSION};
pub use elementwise::{broadcast_shape, sigmoid, softplus, Unary};
pub use gradcheck::{finite_difference_check, finite_difference_report, finite_difference_report_with, relative_error, GradReport, Stencil};
pub use linalg::gemm;
pub use params::{Param, ParamId, ParamStore};
pub use reduce::LAYER_NORM_EPS;
pub use rng::{derive_seed, Rng};
pub use tensor::{grad_enabled, no_grad, BackwardOp, BackwardStats, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape { op: &'static str, shape: Vec<usize>, reason: String },
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("backward needs a scalar output, got shape {0:?}")]
    NonScalarBackward(Vec<usize>),
}
