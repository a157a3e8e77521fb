//! Energy-conditioned text-to-audio latent diffusion, desk scale.
//!
//! The crate covers the full pipeline: waveform and mel-spectrogram DSP, a
//! per-frame energy control signal, a video-embedding-to-energy predictor,
//! a convolutional VAE, a text-conditioned latent diffusion model with an
//! energy adapter wired in through zero convolutions, alignment metrics,
//! and a procedural paired-data generator. Everything trains through the
//! in-crate reverse-mode tape in 64-bit floats.

pub mod error;
pub mod adapter;
pub mod config;
pub mod diffusion;
pub mod dsp;
pub mod energy;
pub mod features;
pub mod metrics;
pub mod nn;
pub mod numerics;
pub mod phi;
pub mod synth;
pub mod vae;

pub use error::{Error, Result};
pub use numerics::{RngState, Tensor};
