//! Dense `f64` tensors and a define-by-run reverse-mode tape covering the
//! primitives of a hybrid CNN/Transformer encoder-decoder.

pub mod check;
mod composite;
pub mod error;
mod kernels;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use kernels::PoolKind;
pub use tape::{Gradients, NormLayout, NormStats, Tape, Var};
pub use tensor::Tensor;

/// Output extent of a convolution or pooling window, `None` if fractional.
pub fn conv_out_extent(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    kernels::conv::out_extent(size, k, stride, pad)
}
