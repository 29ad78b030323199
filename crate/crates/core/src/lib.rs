//! Finite discrete token (FDT) multimodal representations on synthetic data.
//!
//! Image-like and text-like element sets are encoded by small MLPs, grounded
//! onto a shared learnable codebook, and trained with a symmetric InfoNCE
//! objective. An attention-pooling baseline, retrieval and completeness
//! evaluations, and a synthetic concept world with known ground truth are
//! included.

pub mod checks;
pub mod contrastive;
pub mod encoders;
pub mod error;
pub mod fdt;
pub mod numkit;
pub mod rng;
pub mod scalar;
pub mod model;
pub mod simplex;
pub mod synthworld;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = numkit::Tensor<f64>;
pub type Tensor32 = numkit::Tensor<f32>;
pub type Codebook64 = fdt::Codebook<f64>;
