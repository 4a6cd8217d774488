//! Latent-diffusion synthetic augmentation.
//!
//! A latent autoencoder and a latent denoiser are pre-trained on an unlabeled
//! multi-source pool. On a small labeled set from an unseen source the
//! decoder is fine-tuned with an auxiliary classification loss and a
//! time-dependent latent classifier is trained to guide sampling. Generated
//! candidates are filtered by confidence and ranked by distance to real class
//! centroids before being added to the downstream training set.

pub mod checkpoint;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod sampling;
pub mod selection;
pub mod training;

pub use error::{Error, Result};
