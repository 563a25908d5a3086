//! Masked-attention denoising diffusion for multivariate time-series anomaly detection.

pub mod adnm;
pub mod bundle;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod graph;
pub mod pipeline;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
