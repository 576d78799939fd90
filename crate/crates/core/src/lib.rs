//! Masked-autoencoder pretraining for a hierarchical volumetric
//! transformer segmenter, on seeded synthetic phantoms.
//!
//! The numerics are generic over [`Scalar`] (`f32` for training, `f64` for
//! gradient checks); the aliases below name the concrete instantiations.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod mae;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod patch;
pub mod rng;
pub mod scalar;
pub mod seg;
pub mod selfcheck;
pub mod tensor;
pub mod transformer;

pub use error::{Error, FormatError, Result};
pub use params::{Init, ParamId, ParamStore};
pub use rng::Rng;
pub use scalar::{DType, Scalar};
pub use tensor::{grad_check, layer_norm, no_grad, Gradients, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
