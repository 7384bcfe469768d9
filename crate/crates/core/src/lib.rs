//! Class-conditional denoising diffusion models for radar-style imagery.
//!
//! The crate bundles a small reverse-mode tensor engine ([`autograd`]), the
//! diffusion mathematics ([`schedule`], [`diffusion`]), a noise-prediction
//! UNet ([`unet`]), data preparation ([`data`]), training ([`train`]) and
//! sample-quality metrics ([`metrics`]).

pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod rng;
pub mod schedule;
pub mod tensor;
pub mod train;
pub mod unet;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
