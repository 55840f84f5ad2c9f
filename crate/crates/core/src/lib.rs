//! Uncertainty-aware vehicle motion prediction on rasterized scenes.
//!
//! The crate is generic over the element type ([`Scalar`]): models train in
//! `f32` and are verified in `f64`. Concrete aliases are provided below.

pub mod ablation;
pub mod autodiff;
pub mod config;
pub mod ensemble;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod scene;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
