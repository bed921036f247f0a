//! Minimal f64 reverse-mode autodiff engine.
//!
//! Built for small from-scratch vision models: CHW convolution, pooling,
//! bilinear resampling with coordinate gradients, attention primitives, and
//! AdamW. Kernels are data-parallel via rayon (`parallel` feature, default)
//! with sequential fallbacks that stay compiled for benchmarking.

pub mod gradcheck;
pub mod init;
pub mod kernels;
pub mod layers;
pub mod optim;
mod sample;
mod tape;
mod tensor;

pub use layers::{bind, Conv2d, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamId, ParamStore};
pub use optim::{poly_lr, AdamW, AdamWConfig};
pub use tape::{GradSink, Grads, NodeId, Tape};
pub use tensor::Tensor;
