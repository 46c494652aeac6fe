//! Hyperspectral image restoration with low-rank spectral-spatial transformers.
//!
//! The network cascades stages that factor their residual update into a
//! basis component and a U-shaped abundance component; each stage is built
//! from blocks that combine spectral-wise and window-based self-attention
//! with a gated feed-forward network. The crate also carries degradation
//! simulators, quality metrics, a training loop, and file formats.

pub mod attention;
pub mod autograd;
pub mod checkpoint;
pub mod cube;
pub mod degradations;
pub mod error;
pub mod lss_block;
pub mod metrics;
pub mod model;
pub mod params;
pub mod slsst;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
