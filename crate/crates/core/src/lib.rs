//! Norm-based generalization-bound measurements for convolutional networks.
//!
//! The crate builds weight-sharing networks from explicit patch maps,
//! measures the data- and weight-dependent quantities that norm-based
//! capacity bounds consume, evaluates those bounds next to the classical
//! spectral baselines, and provides executable covering-number constructions.
//!
//! Numeric kernels are generic over [`Scalar`] (`f32` or `f64`). Training
//! normally runs in `f32`; every bound is evaluated in `f64`.

pub mod bounds;
pub mod convnet;
pub mod covers;
pub mod data;
pub mod dip;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod measures;
pub mod scalar;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix64 = linalg::Matrix<f64>;
pub type Matrix32 = linalg::Matrix<f32>;
pub type WeightSet64 = convnet::WeightSet<f64>;
pub type WeightSet32 = convnet::WeightSet<f32>;
pub type Trace64 = convnet::ActivationTrace<f64>;
pub type Trace32 = convnet::ActivationTrace<f32>;
