//! Swin UNETR for 3D volumes: a shifted-window transformer encoder with a
//! convolutional U-shaped decoder, three-task self-supervised pre-training,
//! a synthetic phantom data pipeline, and segmentation metrics.
//!
//! Everything runs on a small tape-based autodiff layer ([`diffops`]) generic
//! over `f32` (training) and `f64` (gradient checks).

pub mod datapipe;
pub mod decoder;
pub mod diffops;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod params;
pub mod ssl;
pub mod swin3d;
pub mod tensor;

pub use error::{Error, Result};
pub use params::{Builder, Init, ParamId, ParamStore};
pub use tensor::{Real, Tensor};
