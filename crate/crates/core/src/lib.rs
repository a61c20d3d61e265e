//! Siamese transition masked autoencoders for unsupervised visual anomaly
//! detection.
//!
//! Images pass through a frozen CNN whose multi-level activations are fused
//! into one feature map. The map is cut into patch tokens, randomly split in
//! two halves, and each half is encoded by a shared transformer. The decoder
//! places each half's latents at the positions of the *other* half, so every
//! location must be predicted from context it never saw. Reconstruction error
//! against the original features, in both magnitude and direction, gives the
//! anomaly map.

pub mod data;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod fptd;
pub mod interp;
pub mod lpsr;
pub mod model;
pub mod pipeline;
pub mod real;
pub mod residuals;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
