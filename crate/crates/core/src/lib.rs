//! Latent diffusion super-resolution with an adversarially trained,
//! adaptively corrupted discriminator.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the common choices.

pub mod adversarial;
pub mod autoencoder;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod graph;
pub mod networks;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod schedule;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Generator32 = networks::Generator<f32>;
pub type Generator64 = networks::Generator<f64>;
pub type Discriminator32 = networks::Discriminator<f32>;
pub type Discriminator64 = networks::Discriminator<f64>;
pub type Codec32 = autoencoder::Codec<f32>;
pub type Codec64 = autoencoder::Codec<f64>;
pub type Checkpoint32 = trainer::Checkpoint<f32>;
pub type Checkpoint64 = trainer::Checkpoint<f64>;
pub type ImageTensor32 = tensor::ImageTensor<f32>;
pub type ImageTensor64 = tensor::ImageTensor<f64>;
pub type LatentTensor32 = tensor::LatentTensor<f32>;
pub type LatentTensor64 = tensor::LatentTensor<f64>;
