use std::f64::consts::PI;

use candle::{DType, Device, Tensor};
use nalgebra::DMatrix;

use crate::audio::mel::padded_hann;
use crate::audio::{mel_filterbank, AudioConfig, MelSpectrogram, Waveform};
use crate::error::{config, invalid, Result};
use crate::util::hash_tensors;

/// Frozen, differentiable mel-to-waveform inversion.
///
/// `exp(mel)` is mapped back to a linear magnitude spectrogram through the
/// pseudo-inverse of the mel filterbank, each frame is synthesized with zero
/// phase about the frame centre, windowed, and overlap-added with
/// window-power normalization. Every step is a fixed linear map or a ReLU, so
/// gradients flow from the waveform back to the mel input.
#[derive(Debug, Clone)]
pub struct Vocoder {
    cfg: AudioConfig,
    /// `(N, F)`: mel → linear magnitude.
    pinv_t: Tensor,
    /// `(F, n_fft)`: magnitude → windowed centred frame.
    synth: Tensor,
}

impl Vocoder {
    pub fn new(cfg: &AudioConfig, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        if cfg.fft_size % cfg.hop_length != 0 {
            return config(format!(
                "vocoder needs fft_size ({}) to be a multiple of hop_length ({})",
                cfg.fft_size, cfg.hop_length
            ));
        }
        let n_fft = cfg.fft_size;
        let n_freqs = cfg.n_freqs();
        let (bank, _) = mel_filterbank(cfg);
        let m = DMatrix::from_fn(cfg.n_mel_bands, n_freqs, |i, j| bank[i][j]);
        let pinv = m
            .pseudo_inverse(1e-10)
            .map_err(|e| crate::Error::Config(format!("filterbank pseudo-inverse failed: {e}")))?;
        // pinv is (F, N); store its transpose for row-vector products.
        let mut pinv_t = Vec::with_capacity(cfg.n_mel_bands * n_freqs);
        for i in 0..cfg.n_mel_bands {
            for j in 0..n_freqs {
                pinv_t.push(pinv[(j, i)]);
            }
        }

        let window = padded_hann(cfg);
        let half = (n_fft / 2) as f64;
        let mut synth = Vec::with_capacity(n_freqs * n_fft);
        for k in 0..n_freqs {
            let c = if k == 0 || 2 * k == n_fft { 1.0 } else { 2.0 };
            for (n, w) in window.iter().enumerate() {
                let phase = 2.0 * PI * k as f64 * (n as f64 - half) / n_fft as f64;
                synth.push(w * c * phase.cos() / n_fft as f64);
            }
        }
        Ok(Self {
            cfg: cfg.clone(),
            pinv_t: Tensor::from_vec(pinv_t, (cfg.n_mel_bands, n_freqs), device)?.to_dtype(dtype)?,
            synth: Tensor::from_vec(synth, (n_freqs, n_fft), device)?.to_dtype(dtype)?,
        })
    }

    pub fn config(&self) -> &AudioConfig {
        &self.cfg
    }

    /// Output samples for `n_frames` mel frames.
    pub fn output_len(&self, n_frames: usize) -> usize {
        self.cfg.hop_length * n_frames.saturating_sub(1)
    }

    // 1 / Σ_t w²(n − t·hop) over the trimmed output region.
    fn inverse_envelope(&self, n_frames: usize) -> Vec<f64> {
        let n_fft = self.cfg.fft_size;
        let hop = self.cfg.hop_length;
        let window = padded_hann(&self.cfg);
        let full = hop * (n_frames - 1) + n_fft;
        let mut env = vec![0.0; full];
        for t in 0..n_frames {
            for (n, w) in window.iter().enumerate() {
                env[t * hop + n] += w * w;
            }
        }
        env[n_fft / 2..n_fft / 2 + self.output_len(n_frames)]
            .iter()
            .map(|&e| if e > 1e-8 { 1.0 / e } else { 0.0 })
            .collect()
    }

    /// `(B, N, T)` log-mel → `(B, hop·(T−1))` waveform.
    pub fn forward(&self, mel: &Tensor) -> Result<Tensor> {
        let (b, n, t) = mel.dims3()?;
        if n != self.cfg.n_mel_bands {
            return invalid(format!("vocoder expects {} bands, got {n}", self.cfg.n_mel_bands));
        }
        if t < 2 {
            return invalid("vocoder needs at least two frames");
        }
        let dtype = mel.dtype();
        let n_fft = self.cfg.fft_size;
        let hop = self.cfg.hop_length;
        let overlap = n_fft / hop;

        let mag = mel.exp()?.transpose(1, 2)?.contiguous()?;
        let lin = mag.broadcast_matmul(&self.pinv_t.to_dtype(dtype)?)?.relu()?;
        let frames = lin.broadcast_matmul(&self.synth.to_dtype(dtype)?)?;
        let frames = frames.reshape((b, t, overlap, hop))?;

        let mut acc: Option<Tensor> = None;
        for j in 0..overlap {
            let chunk = frames
                .narrow(2, j, 1)?
                .squeeze(2)?
                .pad_with_zeros(1, j, overlap - 1 - j)?;
            acc = Some(match acc {
                None => chunk,
                Some(a) => (a + chunk)?,
            });
        }
        let full = acc.expect("overlap >= 1").reshape((b, (t + overlap - 1) * hop))?;
        let out_len = self.output_len(t);
        let trimmed = full.narrow(1, n_fft / 2, out_len)?;
        let env = Tensor::from_vec(self.inverse_envelope(t), (1, out_len), mel.device())?.to_dtype(dtype)?;
        Ok(trimmed.broadcast_mul(&env)?)
    }

    pub fn vocode(&self, mel: &MelSpectrogram) -> Result<Waveform> {
        let wav = self.forward(&mel.to_tensor(self.pinv_t.device())?)?;
        Waveform::from_tensor(&wav, self.cfg.sample_rate_hz)
    }

    pub fn param_hash(&self) -> Result<String> {
        hash_tensors([("pinv_t", &self.pinv_t), ("synth", &self.synth)])
    }
}
