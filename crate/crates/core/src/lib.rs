//! Explainable classification with a split-latent VAE: synthetic leaf data, the
//! VAE and its adversarial heads, the final classifier, boundary-sampling
//! explanations, the class-specific variant and evaluation oracles.

pub mod classifier;
pub mod eclfcs;
pub mod error;
pub mod explainer;
#[macro_use]
pub mod textconf;
pub mod heads;
pub mod imageio;
pub mod metrics;
pub mod seed;
pub mod synthleaf;
pub mod vae;

pub use error::{EclfError, Result};
