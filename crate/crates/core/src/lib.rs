//! Render, mask, adapter and evaluation core for refining extrapolated views
//! of a 3D Gaussian splatting scene.

pub mod adapter;
pub mod error;
pub mod mask;
pub mod metrics;
pub mod palette;
pub mod pipeline;
pub mod render;
pub mod scene;

pub use error::{Error, Result};
