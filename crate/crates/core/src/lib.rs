//! Compact convolutional transformer pipeline for chest radiograph
//! classification: contrast enhancement, seeded augmentation, a CCT model
//! with its own reverse-mode autodiff, training, evaluation and Grad-CAM.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the two instantiations.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod gradcam;
pub mod metrics;
pub mod model;
pub mod preprocess;
pub mod run;
pub mod scalar;
pub mod selftest;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::{Graph, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type Params32 = model::CctParams<Tensor<f32>>;
pub type Params64 = model::CctParams<Tensor<f64>>;
pub type TrainState32 = train::TrainState<f32>;
pub type TrainState64 = train::TrainState<f64>;
