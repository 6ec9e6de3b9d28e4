//! Two-stage minutia extraction for latent fingerprints: a fully
//! convolutional proposal network and a region classifier sharing one
//! convolutional trunk.

pub mod benchmark;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod image;
pub mod lbfgs;
pub mod losses;
pub mod minutia;
pub mod model;
pub mod postprocess;
pub mod reconstruct;
pub mod render;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use minutia::Minutia;
pub use model::{BackboneConfig, Model, NetworkParams};
pub use tensor::Tensor;
