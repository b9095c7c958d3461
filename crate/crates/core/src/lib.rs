//! Streaming autoregressive latent-video diffusion engine.
//!
//! A small latent-video transformer generated chunk by chunk with
//! per-denoising-timestep KV caches and a pinned reference sink, trained by
//! score-distribution matching with phased CFG scheduling, long-horizon
//! tail-only forcing, and a pixel-domain decoder refiner.

pub mod accdmd;
pub mod cache;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod forcing;
pub mod harness;
pub mod inference;
pub mod model;
pub mod numeric;
pub mod refiner;

pub use error::{Error, Result};
