//! Underwater image enhancement with a shifted-window transformer U-Net
//! generator and a patch discriminator, built on a small f32 autodiff core.

pub mod data;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod swin;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
