//! Desk-scale latent-diffusion toolkit for paired stain translation.
//!
//! The pipeline runs end to end on a procedurally generated dataset:
//! [`synth`] renders paired images, [`trainer`] fits a small conditional
//! U-Net ([`denoiser`]) with v-prediction on a zero-terminal-SNR
//! [`schedule`], [`sampler`] translates by DDIM inversion followed by
//! η-scheduled stochastic denoising, and [`metrics`] scores the result.

pub mod codec;
pub mod config;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod sampler;
pub mod schedule;
pub mod synth;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};
