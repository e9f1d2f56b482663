//! Whole-brain visual decoding on a synthetic ground-truth world: fMRI
//! preprocessing, a causal transformer encoder, trimodal contrastive
//! alignment, a diffusion prior with image reconstruction, evaluation
//! metrics and interpretability analyses.

pub mod analysis;
pub mod autograd;
pub mod config;
pub mod contrast;
pub mod encoder;
pub mod error;
pub mod io;
pub mod metrics;
pub mod params;
pub mod pipeline;
pub mod plot;
pub mod preproc;
pub mod prior;
pub mod rng;
pub mod synthworld;

pub use error::{Error, Result};
