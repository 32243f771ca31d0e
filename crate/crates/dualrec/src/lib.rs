//! Dual-view (front/back) image to triplane-NeRF reconstruction.
//!
//! A desk-scale reconstruction engine: a trainable patch-transformer encoder
//! feeds a triplane transformer decoder with LoRA adapters; the back-view
//! triplane is rotated into the front frame and fused (windowed cross
//! attention, addition, or convolution); a differentiable volume renderer
//! produces novel views. Training data comes from procedurally generated
//! analytic scenes rendered by a ground-truth ray marcher.
//!
//! All numerics are generic over the scalar type: f32 for training, f64 for
//! gradient checking.

pub mod camera;
pub mod cli;
pub mod config;
pub mod diffmath;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod fusion;
pub mod imgbuf;
pub mod nerf;
pub mod nn;
pub mod scalar;
pub mod scenegen;
pub mod training;
pub mod triform;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// 32-bit tensor used for training and inference.
pub type Tensor32 = diffmath::Tensor<f32>;
/// 64-bit tensor used for gradient checking.
pub type Tensor64 = diffmath::Tensor<f64>;
