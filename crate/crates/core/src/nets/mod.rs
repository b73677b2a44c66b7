//! Generator-side networks: generator with AdaIN style injection, style
//! encoder, frozen F0 network and the frozen linear-inversion vocoder.

mod adain;
mod f0;
mod generator;
pub(crate) mod layers;
mod style;
mod vocoder;

pub use adain::{adain, instance_norm, AdaIn};
pub use f0::{median_voiced, F0Features, F0Net};
pub use generator::Generator;
pub use style::{StyleEncoder, StyleVector};
pub use vocoder::Vocoder;

use serde::{Deserialize, Serialize};

use crate::error::{config, Result};

/// Fixed affine normalization applied to log-mel inputs of every network.
pub const MEL_MEAN: f64 = -4.0;
pub const MEL_STD: f64 = 4.0;

pub(crate) const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub style_dim: usize,
    /// Channel width of the first generator / style-encoder stage.
    pub base_channels: usize,
    /// Cap on channel width as stages double it.
    pub max_channels: usize,
    /// Down-sampling stages in the generator encoder (mirrored by the decoder).
    pub n_stages: usize,
    /// AdaIN residual blocks at the generator bottleneck, before up-sampling.
    pub n_adain_blocks: usize,
    /// Channels of the F0 network's convolutional features.
    pub f0_channels: usize,
    /// Width of the first critic layer.
    pub critic_channels: usize,
    /// Strided convolution layers in each critic.
    pub critic_layers: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            style_dim: 64,
            base_channels: 32,
            max_channels: 128,
            n_stages: 3,
            n_adain_blocks: 1,
            f0_channels: 32,
            critic_channels: 32,
            critic_layers: 4,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self, n_mel_bands: usize) -> Result<()> {
        let positive = [
            ("style_dim", self.style_dim),
            ("base_channels", self.base_channels),
            ("max_channels", self.max_channels),
            ("f0_channels", self.f0_channels),
            ("critic_channels", self.critic_channels),
            ("critic_layers", self.critic_layers),
        ];
        for (name, v) in positive {
            if v == 0 {
                return config(format!("{name} must be positive"));
            }
        }
        let factor = 1usize << self.n_stages;
        if n_mel_bands % factor != 0 {
            return config(format!(
                "{n_mel_bands} mel bands are not divisible by 2^{} generator stages",
                self.n_stages
            ));
        }
        Ok(())
    }

    /// Channel width after generator stage `i` (stage 0 is the stem).
    pub(crate) fn stage_channels(&self, i: usize) -> usize {
        (self.base_channels << i).min(self.max_channels)
    }
}
