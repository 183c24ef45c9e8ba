//! Diffusion transformer with DeepSeek-style mixture-of-experts FFNs,
//! rotary attention and rectified-flow training, on a small f64 autodiff
//! engine.

pub mod analytics;
pub mod attention;
pub mod cli;
pub mod config;
pub mod error;
pub mod flow;
pub mod graph;
pub mod model;
pub mod moe;
pub mod params;
pub mod rope;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
