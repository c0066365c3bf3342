//! Feature-affinity assisted quantized distillation.
//!
//! The numeric core is generic over [`Scalar`] (`f32` for training, `f64`
//! for gradient checks and the verification suites); the aliases below name
//! the concrete instantiations used by the command-line driver.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod ffa;
pub mod kernels;
pub mod losses;
pub mod models;
pub mod quantizers;
pub mod scalar;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = autodiff::Graph<f32>;
pub type Graph64 = autodiff::Graph<f64>;
