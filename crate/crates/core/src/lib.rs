//! Binary-attention image steganography: texture and feature-distortion
//! attention models, a bit-plane codec, and a steganalysis harness.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the common instantiations.

pub mod analysis;
pub mod autodiff;
pub mod codec;
pub mod error;
pub mod extractor;
pub mod fusion;
pub mod image;
pub mod itc;
pub mod mfd;
pub mod models;
pub mod nn;
pub mod penalty;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod synthetic;
pub mod tensor;
pub mod texture;
pub mod training;

pub use error::{BasnError, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type FloatImage32 = image::FloatImage<f32>;
pub type FloatImage64 = image::FloatImage<f64>;
pub type AttentionMap32 = image::AttentionMap<f32>;
pub type AttentionMap64 = image::AttentionMap<f64>;
pub type Graph32 = autodiff::Graph<f32>;
pub type Graph64 = autodiff::Graph<f64>;
pub type ItcNetwork32 = itc::ItcNetwork<f32>;
pub type ItcNetwork64 = itc::ItcNetwork<f64>;
pub type MfdNetwork32 = mfd::MfdNetwork<f32>;
pub type MfdNetwork64 = mfd::MfdNetwork<f64>;
