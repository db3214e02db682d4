//! Single-core vision-transformer stack for estimating emission quantities
//! from synthetic satellite scenes.
//!
//! The crate is self-contained: a small reverse-mode autodiff tensor engine,
//! transformer building blocks, two model variants (CO2 plume scenes with a
//! weather token, NO2 scenes with a dual-stream cross-attention encoder),
//! synthetic data generators with analytically known labels, an AdamW
//! training loop, and a CLI (`geovit`) wrapping the whole pipeline.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{Dtype, Scalar};
pub use tensor::Tensor;
