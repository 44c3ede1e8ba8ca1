//! Laboratory for weighted-calibration quantization of small diffusion
//! models: a from-scratch reverse-mode tape, a toy denoiser and sampler,
//! soft-rounding weight quantization with block-wise reconstruction, and a
//! bi-level sample-weighting optimizer with verifiable first-order
//! predictions. Everything is deterministic given a master seed.

pub mod ad;
pub mod calib;
pub mod config;
pub mod diagnostics;
pub mod diffusion;
pub mod error;
pub mod fdcheck;
pub mod model;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod quant;
pub mod rng;
pub mod stats;
pub mod tensor;
pub mod weighting;

pub use error::{Error, Result};
