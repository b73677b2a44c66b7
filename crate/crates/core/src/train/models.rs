//! The full model bundle: trainable generator side, trainable critics and the
//! frozen vocoder / pitch / SLM modules.

use std::path::Path;

use candle::{DType, Device};
use candle_nn::{VarBuilder, VarMap};
use serde::{Deserialize, Serialize};

use crate::audio::AudioConfig;
use crate::critics::{MelDiscriminator, SlmDiscriminator, SourceClassifier};
use crate::error::{Error, Result};
use crate::nets::{F0Net, Generator, NetworkConfig, StyleEncoder, Vocoder};
use crate::slm::SlmBackbone;
use crate::util::{hash_varmap, init_varmap, stream_rng};

/// Fingerprints of the frozen modules.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrozenHashes {
    pub vocoder: String,
    pub f0: String,
    pub slm: String,
}

pub const GENERATOR_FILE: &str = "generator.safetensors";
pub const CRITICS_FILE: &str = "critics.safetensors";

pub struct Models {
    pub audio: AudioConfig,
    pub network: NetworkConfig,
    pub n_speakers: usize,
    pub device: Device,
    /// Generator and style encoder variables (`generator.*`, `style.*`).
    pub gen_vars: VarMap,
    /// Critic variables (`mel_d.*`, `slm_d.*`, `cls.*`).
    pub disc_vars: VarMap,
    pub generator: Generator,
    pub style: StyleEncoder,
    pub mel_d: MelDiscriminator,
    pub slm_d: SlmDiscriminator,
    pub classifier: SourceClassifier,
    pub f0: F0Net,
    pub vocoder: Vocoder,
    pub backbone: SlmBackbone,
}

impl Models {
    /// Builds every module and draws trainable weights from `seed`.
    pub fn new(audio: &AudioConfig, network: &NetworkConfig, n_speakers: usize, seed: u64, device: &Device) -> Result<Self> {
        let m = Self::build(audio, network, n_speakers, device)?;
        init_varmap(&m.gen_vars, &mut stream_rng(seed, "generator"))?;
        init_varmap(&m.disc_vars, &mut stream_rng(seed, "critics"))?;
        Ok(m)
    }

    fn build(audio: &AudioConfig, network: &NetworkConfig, n_speakers: usize, device: &Device) -> Result<Self> {
        audio.validate()?;
        network.validate(audio.n_mel_bands)?;
        if n_speakers < 2 {
            return Err(Error::Config(format!("need at least two speakers, got {n_speakers}")));
        }
        let n = audio.n_mel_bands;
        let gen_vars = VarMap::new();
        let disc_vars = VarMap::new();
        let gvb = VarBuilder::from_varmap(&gen_vars, DType::F32, device);
        let dvb = VarBuilder::from_varmap(&disc_vars, DType::F32, device);
        Ok(Self {
            generator: Generator::new(network, n, gvb.pp("generator"))?,
            style: StyleEncoder::new(network, n, gvb.pp("style"))?,
            mel_d: MelDiscriminator::new(network, n, n_speakers, dvb.pp("mel_d"))?,
            slm_d: SlmDiscriminator::new(network, dvb.pp("slm_d"))?,
            classifier: SourceClassifier::new(network, n_speakers, dvb.pp("cls"))?,
            f0: F0Net::new(audio, network.f0_channels, device)?,
            vocoder: Vocoder::new(audio, DType::F32, device)?,
            backbone: SlmBackbone::new(device)?,
            audio: audio.clone(),
            network: network.clone(),
            n_speakers,
            device: device.clone(),
            gen_vars,
            disc_vars,
        })
    }

    pub fn frozen_hashes(&self) -> Result<FrozenHashes> {
        Ok(FrozenHashes {
            vocoder: self.vocoder.param_hash()?,
            f0: self.f0.param_hash()?,
            slm: self.backbone.param_hash()?,
        })
    }

    pub fn generator_hash(&self) -> Result<String> {
        hash_varmap(&self.gen_vars)
    }

    pub fn critics_hash(&self) -> Result<String> {
        hash_varmap(&self.disc_vars)
    }

    pub fn save_weights(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.gen_vars.save(dir.join(GENERATOR_FILE))?;
        self.disc_vars.save(dir.join(CRITICS_FILE))?;
        Ok(())
    }

    /// Rebuilds the bundle for the given configuration and loads trainable
    /// weights from `dir`. Any name or shape mismatch is an error.
    pub fn load_weights(
        dir: impl AsRef<Path>,
        audio: &AudioConfig,
        network: &NetworkConfig,
        n_speakers: usize,
        device: &Device,
    ) -> Result<Self> {
        let dir = dir.as_ref();
        let mut m = Self::build(audio, network, n_speakers, device)?;
        let wrap = |file: &str, e: candle::Error| Error::Checkpoint {
            path: dir.join(file),
            msg: e.to_string(),
        };
        m.gen_vars.load(dir.join(GENERATOR_FILE)).map_err(|e| wrap(GENERATOR_FILE, e))?;
        m.disc_vars.load(dir.join(CRITICS_FILE)).map_err(|e| wrap(CRITICS_FILE, e))?;
        Ok(m)
    }
}
