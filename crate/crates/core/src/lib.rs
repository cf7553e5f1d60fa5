//! Compressed anchor-based Gaussian splatting.
//!
//! Anchors carry a location, a factored covariance and a reference
//! embedding; each anchor predicts K coupled Gaussians from residual
//! embeddings and a hash-grid context. A learned entropy model drives both
//! rate-constrained training and a range-coded bitstream. Sequences are
//! coded as an intra frame followed by predicted frames of residue grids.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::too_many_arguments, clippy::type_complexity)]

pub mod codec;
pub mod config;
pub mod dataset;
pub mod entropy_model;
pub mod error;
pub mod feature_grid;
pub mod math;
pub mod nn;
pub mod primitives;
pub mod rd_optimizer;
pub mod renderer;
pub mod scalar;
pub mod spatial_prediction;
pub mod synthetic;
pub mod temporal;

pub use config::{CodecConfig, Settings};
pub use error::{Error, Result};
pub use primitives::{AnchorPrimitive, CoupledPrimitive, FactoredCovariance, Gaussian3D, SceneModel};
pub use renderer::{Camera, Image};
pub use scalar::Real;

pub type SceneModelF32 = primitives::SceneModel<f32>;
pub type SceneModelF64 = primitives::SceneModel<f64>;
pub type Gaussian3DF32 = primitives::Gaussian3D<f32>;
pub type Gaussian3DF64 = primitives::Gaussian3D<f64>;
pub type CameraF32 = renderer::Camera<f32>;
pub type CameraF64 = renderer::Camera<f64>;
pub type ImageF32 = renderer::Image<f32>;
pub type ImageF64 = renderer::Image<f64>;
