//! Desk-scale diffusion and LoRA style-transfer laboratory.
//!
//! A small convolutional noise predictor, trained with a hand-written
//! reverse-mode autodiff engine, carries a content block and a style block.
//! Low-rank adapters on those blocks are learned from single images under
//! noise-prediction or reconstructed-signal losses and combined at sampling
//! time with content and style guidance terms.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod guidance;
pub mod image_io;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
