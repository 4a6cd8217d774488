//! Parametric networks: latent autoencoder, U-Net denoiser, classifiers.

pub mod autoencoder;
pub mod conv;
pub mod classifier;
pub mod denoiser;
pub mod layers;
mod ops;
pub mod params;
pub mod perceptual;

pub use autoencoder::{Decoder, Encoder, LaeConfig, LatentAutoencoder};
pub use classifier::{
    ClassifierRole, ImageClassifier, ImageClassifierConfig, LatentClassifier, LatentClassifierConfig,
};
pub use denoiser::{Denoiser, DenoiserConfig};
pub use layers::{pool_with_weights, timestep_embedding, AttentionPool};
pub use params::ParamStore;
pub use perceptual::PerceptualSurrogate;
