//! Audio representations and analysis: waveforms, log-mel spectrograms,
//! band-limited resampling and the per-frame L1 norm.

pub(crate) mod mel;
mod resample;
mod wav;

pub use mel::{compute_mel, mel_filterbank, MelAnalyzer};
pub use resample::{resample, ResampleKernel};
pub use wav::{read_wav, write_wav};

use candle::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{config, invalid, Error, Result};

/// Rate the SLM backbone consumes.
pub const SLM_RATE_HZ: u32 = 16_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AudioConfig {
    pub sample_rate_hz: u32,
    pub n_mel_bands: usize,
    pub fft_size: usize,
    pub hop_length: usize,
    pub window_length: usize,
    pub log_floor: f64,
}

impl Default for AudioConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: 22_050,
            n_mel_bands: 80,
            fft_size: 1024,
            hop_length: 256,
            window_length: 1024,
            log_floor: 1e-5,
        }
    }
}

impl AudioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate_hz == 0 {
            return config("sample_rate_hz must be positive");
        }
        if self.n_mel_bands == 0 {
            return config("n_mel_bands must be at least 1");
        }
        if self.hop_length == 0
            || self.hop_length > self.window_length
            || self.window_length > self.fft_size
        {
            return config(format!(
                "need 0 < hop_length ({}) <= window_length ({}) <= fft_size ({})",
                self.hop_length, self.window_length, self.fft_size
            ));
        }
        if !(self.log_floor > 0.0) {
            return config("log_floor must be positive");
        }
        Ok(())
    }

    /// Number of mel frames produced for a waveform of `n_samples` (centered framing).
    pub fn n_frames(&self, n_samples: usize) -> usize {
        n_samples / self.hop_length + 1
    }

    pub fn n_freqs(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn segment_samples(&self, seconds: f64) -> usize {
        (seconds * self.sample_rate_hz as f64).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate_hz: u32) -> Result<Self> {
        if sample_rate_hz == 0 {
            return invalid("sample rate must be positive");
        }
        if samples.is_empty() {
            return invalid("waveform is empty");
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return invalid(format!("sample {i} is not finite"));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    /// `(1, len)` tensor.
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.samples, (1, self.samples.len()), device)?)
    }

    /// Builds a waveform from a `(len,)` or `(1, len)` tensor.
    pub fn from_tensor(t: &Tensor, sample_rate_hz: u32) -> Result<Self> {
        let samples = t
            .flatten_all()?
            .to_dtype(candle::DType::F32)?
            .to_vec1::<f32>()?;
        Self::new(samples, sample_rate_hz)
    }
}

/// Log-amplitude mel spectrogram, stored band-major (`values[n * n_frames + t]`).
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    values: Vec<f32>,
    n_bands: usize,
    n_frames: usize,
}

impl MelSpectrogram {
    pub fn new(values: Vec<f32>, n_bands: usize, n_frames: usize) -> Result<Self> {
        if n_bands == 0 || n_frames == 0 {
            return invalid("mel spectrogram must have at least one band and one frame");
        }
        if values.len() != n_bands * n_frames {
            return invalid(format!(
                "expected {} values for {n_bands}x{n_frames}, got {}",
                n_bands * n_frames,
                values.len()
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return invalid("mel spectrogram contains non-finite values");
        }
        Ok(Self {
            values,
            n_bands,
            n_frames,
        })
    }

    pub fn n_bands(&self) -> usize {
        self.n_bands
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, band: usize, frame: usize) -> f32 {
        self.values[band * self.n_frames + frame]
    }

    pub fn column(&self, frame: usize) -> impl Iterator<Item = f32> + '_ {
        (0..self.n_bands).map(move |n| self.get(n, frame))
    }

    /// `(1, n_bands, n_frames)` tensor.
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(
            &self.values,
            (1, self.n_bands, self.n_frames),
            device,
        )?)
    }

    /// Accepts `(n_bands, n_frames)` or `(1, n_bands, n_frames)`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            2 => t.clone(),
            3 if t.dim(0)? == 1 => t.squeeze(0)?,
            _ => return invalid(format!("expected a single mel map, got shape {:?}", t.shape())),
        };
        let (n, f) = t.dims2()?;
        let values = t
            .to_dtype(candle::DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        Self::new(values, n, f)
    }

    /// Crops or right-pads (with `pad_value`) to exactly `n_frames`.
    pub fn fit_frames(&self, n_frames: usize, pad_value: f32) -> Result<Self> {
        let mut values = Vec::with_capacity(self.n_bands * n_frames);
        for n in 0..self.n_bands {
            for t in 0..n_frames {
                values.push(if t < self.n_frames {
                    self.get(n, t)
                } else {
                    pad_value
                });
            }
        }
        Self::new(values, self.n_bands, n_frames)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SpeakerId(usize);

impl SpeakerId {
    /// Issues an id against a roster of `roster_size` speakers.
    pub fn new(index: usize, roster_size: usize) -> Result<Self> {
        if index >= roster_size {
            return Err(Error::Index {
                what: "speaker id",
                index,
                len: roster_size,
            });
        }
        Ok(Self(index))
    }

    pub fn index(self) -> usize {
        self.0
    }
}

/// L1 norm of mel column `frame` (0-based).
pub fn frame_norm(mel: &MelSpectrogram, frame: usize) -> Result<f64> {
    if frame >= mel.n_frames() {
        return Err(Error::Index {
            what: "mel frame",
            index: frame,
            len: mel.n_frames(),
        });
    }
    Ok(mel.column(frame).map(|v| (v as f64).abs()).sum())
}
