//! Unsupervised latent-state learning from noisy pendulum images.
//!
//! The pipeline couples a deep-kernel (NN feature map + sparse variational
//! GP) encoder and latent forward model with a convolutional decoder, plus a
//! plain VAE baseline, a self-contained pendulum simulator with a raster
//! renderer, a deterministic training harness, and an evaluation toolkit.
//! Everything runs on the CPU in f64.

pub mod error;
pub mod tensor;
pub mod gp;
pub mod sim;

pub use error::{Error, Result};
