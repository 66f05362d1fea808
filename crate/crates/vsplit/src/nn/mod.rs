//! Minimal tensor toolkit for the encoder-decoder.
//!
//! Tensors use a channels-last layout `(batch, height*width, channels)`:
//! convolutions become an im2col gather followed by a single GEMM, which is
//! the fastest arrangement for this workload on CPU. The bias is folded into
//! the GEMM as a trailing ones column so the backward pass stays pure GEMM +
//! col2im.

pub mod adam;
pub mod conv;
pub mod ops;

pub use adam::{Adam, AdamParams};
pub use conv::ConvLayer;
pub use ops::{conv_cl, floor_at, grad_clamp, randn_tensor, softplus, upsample2x_cl};
