//! Desk-scale voice conversion with speech-language-model (SLM) discriminators.
//!
//! A StarGANv2-VC style generator is trained against a speaker-conditional mel
//! discriminator, an SLM-feature discriminator and an SLM source classifier.
//! The large pretrained components (vocoder, pitch network, SLM encoder) are
//! replaced by frozen, deterministic, differentiable surrogates with the same
//! interfaces.

pub mod audio;
pub mod commands;
pub mod critics;
pub mod dataset;
pub mod error;
pub mod losses;
pub mod nets;
pub mod slm;
pub mod synth;
pub mod train;
pub mod util;

pub use error::{Error, Result};
