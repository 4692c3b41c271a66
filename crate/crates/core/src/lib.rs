//! Early time-series classification with multi-view convolutional
//! representation learning and a gradient-boosted tree head.
//!
//! The network is generic over the floating-point element type (`f32` or
//! `f64`); the aliases below fix it to `f64`, which the data pipeline,
//! tree ensemble and evaluation harness use throughout.

mod binio;
pub mod cdta;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod gbdt;
pub mod mere;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod rng;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = numerics::Tensor<f64>;
pub type Tape = numerics::Tape<f64>;
pub type MereLayer = mere::MereLayer<f64>;
pub type CdtaLayer = cdta::CdtaLayer<f64>;
pub type Model = model::Model<f64>;
