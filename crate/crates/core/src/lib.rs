//! Boundary-aware 3D segmentation of volumetric images.
//!
//! A dilated residual encoder feeds an attention decoder that is supervised
//! with edge maps at three scales. Everything numeric is generic over
//! [`Scalar`] (`f32` or `f64`).

pub mod augment;
pub mod cli;
pub mod config;
pub mod edge;
pub mod inference;
mod error;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod phantom;
pub mod trainer;
pub mod volume_io;

pub use edgeseg_tensor::{Scalar, Shape5, Tensor};
pub use error::{Error, Result};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Independent 64-bit seed for `stream` under `base`. Used to give every
/// sample and every random sub-step its own reproducible generator.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(stream);
    rng.next_u64()
}

pub type Volume32 = volume_io::Volume<f32>;
pub type Volume64 = volume_io::Volume<f64>;
