//! Minimal dense-tensor reverse-mode autodiff.
//!
//! Nine primitives: add, sub, mul, scale, matmul, conv2d (3x3, stride 1,
//! same padding), silu, reduce_mean and mse. The denoiser and every loss in
//! this crate are written against these alone.

pub mod gradcheck;
pub mod ops;
mod tape;

pub use gradcheck::{analytic_gradients, grad_check, grad_check_multi};
pub use tape::{Gradients, Tape, Var};
