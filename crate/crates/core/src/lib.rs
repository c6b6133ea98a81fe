//! Desk-scale lab for transformer inference compression on a synthetic
//! kinematic benchmark: a toy ViT-style pose backbone, error-bounded layer
//! merging, mask-guided token merging, and a v-prediction latent diffusion
//! decoder over a motion-VAE prior, with the evaluation metrics to measure
//! the speed/accuracy trade-offs between them.

pub mod backbone;
pub mod diffusion;
pub mod error;
pub mod layer_merge;
pub mod metrics;
pub mod nn;
pub mod pose;
pub mod rng;
pub mod token_merge;
pub mod vae;

pub use error::{LabError, Result};
