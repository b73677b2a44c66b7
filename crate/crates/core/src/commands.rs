//! Inference-side commands: conversion, projection-head analysis and
//! real-time-factor timing. Each works from a checkpoint directory written by
//! [`crate::train::run_training`].

use std::path::{Path, PathBuf};
use std::time::Instant;

use candle::Device;
use serde::{Deserialize, Serialize};

use crate::audio::{write_wav, MelAnalyzer, MelSpectrogram, Waveform};
use crate::dataset::load_audio;
use crate::error::{invalid, Error, Result};
use crate::slm::{layer_importance, ImportanceNorm, LayerImportance, ProjectionHead};
use crate::train::run::{mismatch, CONFIG_FILE, STATE_FILE};
use crate::train::{latest_checkpoint, CheckpointState, Models, RunConfig, CRITICS_FILE};

/// Published GPU figure for this model family. Context only, never a target.
pub const REFERENCE_GPU_RTF: f64 = 0.0076;

const SLM_HEAD_WEIGHT: &str = "slm_d.proj.weight";
const SLM_HEAD_BIAS: &str = "slm_d.proj.bias";

/// Accepts either a checkpoint directory or a run directory, in which case
/// the newest checkpoint is used.
pub fn resolve_checkpoint(path: impl AsRef<Path>) -> Result<PathBuf> {
    let path = path.as_ref();
    if path.join(STATE_FILE).is_file() {
        return Ok(path.to_path_buf());
    }
    latest_checkpoint(path)?.ok_or_else(|| Error::Checkpoint {
        path: path.to_path_buf(),
        msg: "no checkpoint found".into(),
    })
}

/// A trained generator side plus the frozen modules, ready for inference.
pub struct Converter {
    models: Models,
    config: RunConfig,
    state: CheckpointState,
    analyzer: MelAnalyzer,
}

impl Converter {
    /// Loads a checkpoint. When `expected` is given its audio and network
    /// settings must match the checkpoint exactly.
    pub fn load(checkpoint: impl AsRef<Path>, expected: Option<&RunConfig>, device: &Device) -> Result<Self> {
        let dir = resolve_checkpoint(checkpoint)?;
        let state = CheckpointState::load(&dir)?;
        let config = RunConfig::load(dir.join(CONFIG_FILE))?;
        if let Some(cfg) = expected {
            if cfg.audio != config.audio {
                return Err(mismatch(&dir, "audio configuration"));
            }
            if cfg.network != config.network {
                return Err(mismatch(&dir, "network configuration"));
            }
        }
        let models = Models::load_weights(&dir, &config.audio, &config.network, state.roster.len(), device)?;
        if models.frozen_hashes()? != state.frozen {
            return Err(mismatch(&dir, "frozen module fingerprint"));
        }
        let analyzer = MelAnalyzer::new(&config.audio)?;
        Ok(Self {
            models,
            config,
            state,
            analyzer,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn roster(&self) -> &[String] {
        &self.state.roster
    }

    pub fn epochs_completed(&self) -> usize {
        self.state.epochs_completed
    }

    pub fn models(&self) -> &Models {
        &self.models
    }

    /// Converted log-mel: `G(X_src, S(X_ref), F0(X_src))`.
    pub fn convert_mel(&self, src: &MelSpectrogram, reference: &MelSpectrogram) -> Result<MelSpectrogram> {
        let dev = &self.models.device;
        let x = src.to_tensor(dev)?;
        let h_f0 = self.models.f0.features(&x)?;
        let style = self.models.style.forward(&reference.to_tensor(dev)?)?;
        let out = self.models.generator.forward(&x, &style, &h_f0)?;
        MelSpectrogram::from_tensor(&out)
    }

    /// Full pipeline: mel, pitch, reference style, generator, vocoder. Inputs
    /// at another rate are resampled first. The output has `hop·(T−1)`
    /// samples for a `T`-frame source.
    pub fn convert(&self, src: &Waveform, reference: &Waveform) -> Result<Waveform> {
        let rate = self.config.audio.sample_rate_hz;
        let src = to_rate(src, rate)?;
        let reference = to_rate(reference, rate)?;
        let mel = self.convert_mel(&self.analyzer.analyze(&src)?, &self.analyzer.analyze(&reference)?)?;
        self.models.vocoder.vocode(&mel)
    }

    pub fn output_len(&self, n_samples: usize) -> usize {
        let t = self.config.audio.n_frames(n_samples);
        self.models.vocoder.output_len(t)
    }
}

fn to_rate(wav: &Waveform, rate: u32) -> Result<Waveform> {
    if wav.sample_rate_hz() == rate {
        Ok(wav.clone())
    } else {
        crate::audio::resample(wav, rate)
    }
}

/// Converts `src` toward the voice of `reference` and writes the result.
pub fn convert(
    src: impl AsRef<Path>,
    reference: impl AsRef<Path>,
    checkpoint: impl AsRef<Path>,
    out: impl AsRef<Path>,
    expected: Option<&RunConfig>,
    device: &Device,
) -> Result<Waveform> {
    let conv = Converter::load(checkpoint, expected, device)?;
    let audio = &conv.config().audio;
    let wav = conv.convert(&load_audio(src, audio)?, &load_audio(reference, audio)?)?;
    write_wav(out, &wav)?;
    Ok(wav)
}

/// Projection head of the SLM critic stored in a checkpoint.
pub fn checkpoint_projection_head(checkpoint: impl AsRef<Path>) -> Result<ProjectionHead> {
    let dir = resolve_checkpoint(checkpoint)?;
    let path = dir.join(CRITICS_FILE);
    let tensors = candle::safetensors::load(&path, &Device::Cpu)?;
    let missing = || Error::Checkpoint {
        path: path.clone(),
        msg: "checkpoint holds no SLM critic projection head".into(),
    };
    let weight = tensors.get(SLM_HEAD_WEIGHT).ok_or_else(missing)?;
    let bias = tensors.get(SLM_HEAD_BIAS).ok_or_else(missing)?;
    ProjectionHead::from_parts(&weight.t()?, bias)
}

/// Layer importance of the checkpoint's SLM critic head, written as CSV.
pub fn analyze_weights(checkpoint: impl AsRef<Path>, out_csv: impl AsRef<Path>, norm: ImportanceNorm) -> Result<LayerImportance> {
    let imp = layer_importance(&checkpoint_projection_head(checkpoint)?, norm)?;
    std::fs::write(out_csv, imp.to_csv())?;
    Ok(imp)
}

/// Wall-clock conversion time relative to audio duration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RtfReport {
    pub audio_seconds: f64,
    pub processing_seconds: f64,
    pub rtf: f64,
    pub hardware: String,
}

impl RtfReport {
    pub fn new(audio_seconds: f64, processing_seconds: f64, hardware: impl Into<String>) -> Result<Self> {
        if !(audio_seconds > 0.0 && audio_seconds.is_finite()) {
            return invalid(format!("audio duration must be positive, got {audio_seconds}"));
        }
        if !(processing_seconds > 0.0 && processing_seconds.is_finite()) {
            return invalid(format!("processing time must be positive, got {processing_seconds}"));
        }
        Ok(Self {
            audio_seconds,
            processing_seconds,
            rtf: processing_seconds / audio_seconds,
            hardware: hardware.into(),
        })
    }
}

/// Short description of the machine the timing ran on.
pub fn hardware_description(device: &Device) -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| std::env::consts::ARCH.to_string());
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let dev = match device {
        Device::Cpu => "cpu".to_string(),
        other => format!("{other:?}"),
    };
    format!("{cpu}, {threads} threads, device {dev}")
}

/// Converts every file (first file as the style reference) and reports the
/// total conversion time over the total source duration. Model loading and
/// file decoding are excluded from the timing.
pub fn bench_rtf<P: AsRef<Path>>(checkpoint: impl AsRef<Path>, wav_paths: &[P], device: &Device) -> Result<RtfReport> {
    if wav_paths.is_empty() {
        return invalid("bench-rtf needs at least one input file");
    }
    let conv = Converter::load(checkpoint, None, device)?;
    let audio = conv.config().audio.clone();
    let wavs = wav_paths
        .iter()
        .map(|p| load_audio(p, &audio))
        .collect::<Result<Vec<_>>>()?;
    let reference = &wavs[0];
    let audio_seconds: f64 = wavs.iter().map(Waveform::duration_seconds).sum();
    let start = Instant::now();
    for w in &wavs {
        conv.convert(w, reference)?;
    }
    let processing = start.elapsed().as_secs_f64();
    RtfReport::new(audio_seconds, processing, hardware_description(device))
}
