//! Desk-scale flow-conditioned video-to-video diffusion.

pub mod codec;
pub mod denoiser;
pub mod diffusion;
pub mod editprop;
pub mod error;
pub mod flow;
pub mod imgproc;
pub mod manifest;
pub mod media;
pub mod rng;
pub mod spatialcond;
pub mod synth;
pub mod tensorad;
pub mod timing;

pub use error::{Error, Result};
