//! Two-stage latent-diffusion blind face restoration with a manifold
//! information bottleneck, at desk scale.

pub mod autograd;
pub mod codec;
pub mod config;
pub mod control;
pub mod degrade;
pub mod diffusion;
pub mod error;
pub mod fixtures;
pub mod identity;
pub mod image;
pub mod metrics;
pub mod mib;
pub mod nn;
pub mod ops;
pub mod rng;
pub mod trainer;
pub mod tensor;

pub use error::{Error, Result};
