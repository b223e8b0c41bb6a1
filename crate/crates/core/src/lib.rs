//! Generative classification via conditional denoising diffusion, an
//! adversarial attack suite, and the experiment harness tying them together.
//!
//! The numeric core (`tensor`, `autodiff`, `optim`, `schedule`) is generic
//! over the scalar type; everything model-facing uses the `f64` aliases
//! exported at the crate root.

pub mod attacks;
pub mod autodiff;
pub mod baseline;
pub mod checkpoint;
pub mod classifier;
pub mod dataset;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod grad_check;
pub mod harness;
pub mod lora;
pub mod nn;
pub mod optim;
pub mod report;
pub mod rng;
pub mod scalar;
pub mod schedule;
pub mod tensor;
pub mod tm;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use scalar::Scalar;

/// Default-precision tensor. All experiments run in 64-bit reals.
pub type Tensor = tensor::Tensor<f64>;
/// Default-precision autodiff tape.
pub type Tape = autodiff::Tape<f64>;
/// Default-precision trainable parameter.
pub type Param = autodiff::Param<f64>;
/// Default-precision gradient store.
pub type Gradients = autodiff::Gradients<f64>;
/// Default-precision Adam optimizer.
pub type Adam = optim::Adam<f64>;
/// Default-precision noise schedule.
pub type NoiseSchedule = schedule::NoiseSchedule<f64>;
