//! Autoencoder disentanglement through independent latent subspaces.
//!
//! A small residual autoencoder maps 32×32 face sprites to a latent vector `z`.
//! An invertible mixing matrix `A` turns `z` into source coordinates `s = A⁻¹·z`,
//! which are split into one subspace per face part. Swapping a subspace between
//! two images and decoding should only change the matching image region; a mask
//! loss and an entropy loss train that behaviour.

pub mod error;
pub mod eval;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod rng;
pub mod synthdata;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
