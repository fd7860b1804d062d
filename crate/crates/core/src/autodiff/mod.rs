//! Minimal tape-based reverse-mode differentiation over dense f64
//! tensors, sized for the models in this crate: batched matmul,
//! elementwise ops with leading-axis broadcast, softmax, layer norm,
//! dropout, embedding gather and a fused binary cross-entropy loss.

mod params;
mod tape;
mod tensor;

pub use params::{
    read_checkpoint, write_checkpoint, Checkpoint, CheckpointError, Parameter, ParamSet,
};
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("index {index} out of range for table of {len} rows")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("backward requires a scalar loss")]
    NotScalarLoss,
}
