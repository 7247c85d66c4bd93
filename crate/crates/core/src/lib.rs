//! Activity-aware indoor air quality forecasting: a from-scratch
//! reverse-mode autodiff core, a single-zone pollutant simulator, and a
//! dual-stream forecaster with feedback fusion, training loop and
//! evaluation harness.
//!
//! The numeric core is generic over [`scalar::Scalar`] (`f32` or `f64`);
//! the aliases below fix it to `f64`, which is what the data pipeline,
//! checkpoints and metrics use.

pub mod datagen;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod forecaster;
pub mod fusion;
pub mod gradcheck;
pub mod harness;
pub mod objective;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, ErrorCategory, Result};

pub type Tensor = tensor::Tensor<f64>;
pub type Tape = tensor::Tape<f64>;
pub type Gradients = tensor::Gradients<f64>;
pub type ParamSet = params::ParamSet<f64>;
pub type AdamState = trainer::AdamState<f64>;
