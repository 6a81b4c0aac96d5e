//! Adversarial few-step training of inpainting adapters on tiny pixel-space
//! diffusion backbones.
//!
//! The crate trains one adapter shared by a frozen multi-step ("slow") and a
//! frozen few-step ("fast") backbone, alternating three updates: the adapter
//! through the slow generator with the plain diffusion loss, the adapter
//! through the fast generator against a diffusion discriminator plus a
//! background loss, and the discriminator itself.

pub mod adapter;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod discriminator;
mod error;
pub mod io;
pub mod kernels;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};
