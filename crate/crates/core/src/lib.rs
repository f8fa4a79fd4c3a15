//! Structure-preserving fMRI decoding at desk scale.
//!
//! The crate covers volume and patch file formats, a seeded synthetic world,
//! volumetric preprocessing, a transformer encoder aligned to image-embedding
//! and image-latent targets, a token bridge into a small language model,
//! latent-mixing reconstruction, GradCAM concept localization and the
//! evaluation metrics.

pub mod bridge;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod embedders;
pub mod error;
pub mod eval;
pub mod graph;
pub mod image;
pub mod localize;
pub mod nn;
pub mod pipeline;
pub mod preprocess;
pub mod reconstruct;
pub mod repro;
pub mod seed;
pub mod synth;
pub mod tensor;
pub mod volume;

pub use error::{Error, Result};
