//! LaMamba-Diff: a diffusion U-Net whose blocks combine a four-direction
//! selective state space scan with shifted-window attention, plus a small
//! DDPM engine and an analytical FLOPs auditor.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision for common uses.

pub mod attention;
pub mod autodiff;
pub mod block;
pub mod diffusion;
pub mod error;
pub mod flops;
pub mod harness;
pub mod scalar;
pub mod ssm;
pub mod tensor;
pub mod unet;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::{Rng, Tensor};
pub use unet::{Model, ModelConfig};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
