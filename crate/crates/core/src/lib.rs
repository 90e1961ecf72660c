//! Low-light image enhancement with a spatial-channel window Transformer.
//!
//! The enhancer estimates an illumination map and a noise map from a
//! downscaled copy of the input, then brightens the full-resolution image by
//! iterated curve projection. Training minimizes a feature-space distance
//! measured by a frozen convolutional backbone. [`ope`] scores tracker output
//! with the usual one-pass-evaluation precision and success metrics.

pub mod autograd;
pub mod checkpoint;
pub mod curve;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod imaging;
pub mod loss;
pub mod model;
pub mod nn;
pub mod ope;
pub mod params;
pub mod tensor;
pub mod train;
pub mod window;

pub use curve::{robust_enhance, CurveMaps, ProjectionConfig};
pub use error::{Error, Result};
pub use imaging::ImageTensor;
pub use model::{ablation_variant, Ablation, ModuleFlags, SctConfig, SctModel};
pub use tensor::Tensor;
