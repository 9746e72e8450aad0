//! Differentiable dense numerics: tensors, the recording tape, the
//! finite-difference oracle, the optimizer and complex helpers.

mod adam;
pub mod complex;
mod gradcheck;
mod params;
pub(crate) mod kernels;
mod tape;
mod tensor;

use thiserror::Error;

pub use adam::{adam_step, clip_global_norm, AdamConfig, OptimizerState};
pub use gradcheck::{finite_difference_check, finite_difference_check_at, GradCheck};
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{CustomOp, Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::softplus;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("power-of-ReLU exponent must be at least 1")]
    InvalidPower,
    #[error("NaN gradient for parameter {index}")]
    NanGradient { index: usize },
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{0}")]
    Callback(String),
}

#[inline]
pub(crate) fn relu_pow_scalar(x: f64, ell: u32) -> f64 {
    if x > 0.0 {
        x.powi(ell as i32)
    } else {
        0.0
    }
}

/// `max(0, x)^ell` elementwise on an untaped tensor.
pub fn relu_pow(x: &Tensor, ell: u32) -> Result<Tensor, NumericsError> {
    if ell == 0 {
        return Err(NumericsError::InvalidPower);
    }
    Ok(x.map(|v| relu_pow_scalar(v, ell)))
}
