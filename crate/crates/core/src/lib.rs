//! Source-free domain adaptation for panoramic semantic segmentation.

pub mod ablation;
pub mod adapt;
pub mod cdam;
pub mod checks;
pub mod config;
pub mod dataset;
pub mod error;
pub mod imageio;
pub mod metrics;
pub mod model;
pub mod prototypes;
pub mod pseudo;
pub mod sphere;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
