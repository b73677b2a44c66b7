use std::collections::HashMap;
use std::path::Path;

use candle::{DType, Device, Tensor};

use super::layers::{leaky, normalize_mel};
use crate::audio::{mel_filterbank, AudioConfig, MelAnalyzer, MelSpectrogram};
use crate::error::{invalid, Error, Result};
use crate::synth::tone;
use crate::util::{hash_tensors, stream_rng, uniform_tensor};

/// Seed of the frozen pitch network; fixed so every run shares one backbone.
const F0_SEED: u64 = 0x5eed_f0;
/// Only bands centred at or below this frequency vote on the pitch estimate.
const MAX_PITCH_HZ: f64 = 600.0;
const SHARPNESS: f64 = 2.0;
const GATE_THRESHOLD: f64 = -7.0;
const GATE_WIDTH: f64 = 2.0;

/// Pitch conditioning features and the absolute pitch track of one input.
#[derive(Debug, Clone)]
pub struct F0Features {
    /// `(1, C_f0, T)` convolutional features.
    pub h_f0: Tensor,
    /// Per-frame pitch in Hz, `>= 0` (0 on unvoiced/silent frames).
    pub f0_hz: Vec<f32>,
}

/// Frozen pitch network.
///
/// `h_f0` comes from a fixed random convolution stack over the log-mel input.
/// The pitch track is a differentiable estimator: a sharpened softmax over the
/// low mel bands gives a band-centre expectation, an affine correction fitted
/// on pure tones calibrates it, and an energy gate zeroes silent frames.
#[derive(Debug, Clone)]
pub struct F0Net {
    params: HashMap<String, Tensor>,
    n_bands: usize,
    n_low: usize,
}

fn conv1d(x: &Tensor, w: &Tensor, b: &Tensor, padding: usize) -> Result<Tensor> {
    // Explicit padding: candle's conv1d backward underflows on short inputs
    // when the kernel pads.
    Ok(x.pad_with_zeros(2, padding, padding)?
        .conv1d(w, 0, 1, 1, 1)?
        .broadcast_add(&b.reshape((1, (), 1))?)?)
}

impl F0Net {
    /// Builds the frozen network for `audio` and calibrates its pitch readout.
    pub fn new(audio: &AudioConfig, f0_channels: usize, device: &Device) -> Result<Self> {
        let n = audio.n_mel_bands;
        let (_, centres) = mel_filterbank(audio);
        let n_low = centres.iter().take_while(|&&c| c <= MAX_PITCH_HZ).count().max(2);
        let mut rng = stream_rng(F0_SEED, "f0net");
        let mut params = HashMap::new();
        let w1 = [f0_channels, n, 5];
        let w2 = [f0_channels, f0_channels, 3];
        params.insert("conv1.weight".into(), uniform_tensor(&mut rng, &w1, (3.0 / (n * 5) as f64).sqrt(), device)?);
        params.insert("conv1.bias".into(), Tensor::zeros(f0_channels, DType::F32, device)?);
        params.insert("conv2.weight".into(), uniform_tensor(&mut rng, &w2, (3.0 / (f0_channels * 3) as f64).sqrt(), device)?);
        params.insert("conv2.bias".into(), Tensor::zeros(f0_channels, DType::F32, device)?);
        let low: Vec<f32> = centres[..n_low].iter().map(|&c| c as f32).collect();
        params.insert("centres".into(), Tensor::from_vec(low, n_low, device)?);
        params.insert("calibration".into(), Tensor::new(&[1.0f32, 0.0], device)?);

        let mut net = Self { params, n_bands: n, n_low };
        let (a, b) = net.fit_calibration(audio)?;
        net.params
            .insert("calibration".into(), Tensor::new(&[a as f32, b as f32], device)?);
        Ok(net)
    }

    // Least-squares fit of true tone frequency against the raw estimate.
    fn fit_calibration(&self, audio: &AudioConfig) -> Result<(f64, f64)> {
        let analyzer = MelAnalyzer::new(audio)?;
        let device = self.params["centres"].device().clone();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for k in 0..17 {
            let hz = 80.0 + 20.0 * k as f64;
            let mel = analyzer.analyze(&tone(hz, 0.5, audio.sample_rate_hz, 0.3))?;
            let raw = self.raw_estimate(&mel.to_tensor(&device)?)?;
            let mut v: Vec<f32> = raw.flatten_all()?.to_vec1()?;
            let t = v.len();
            let interior = &mut v[t / 4..3 * t / 4];
            interior.sort_by(f32::total_cmp);
            xs.push(interior[interior.len() / 2] as f64);
            ys.push(hz);
        }
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        let a = if sxx > 0.0 { sxy / sxx } else { 1.0 };
        Ok((a, my - a * mx))
    }

    fn raw_estimate(&self, mel: &Tensor) -> Result<Tensor> {
        let low = mel.narrow(1, 0, self.n_low)?;
        let w = candle_nn::ops::softmax(&(low * SHARPNESS)?, 1)?;
        let centres = self.params["centres"].to_dtype(mel.dtype())?.reshape((1, (), 1))?;
        Ok(w.broadcast_mul(&centres)?.sum(1)?)
    }

    /// Pitch track `(B, T)` in Hz for a `(B, N, T)` log-mel batch; differentiable.
    pub fn pitch(&self, mel: &Tensor) -> Result<Tensor> {
        self.check(mel)?;
        let cal: Vec<f32> = self.params["calibration"].to_vec1()?;
        let est = self.raw_estimate(mel)?.affine(cal[0] as f64, cal[1] as f64)?.relu()?;
        let energy = mel.narrow(1, 0, self.n_low)?.max(1)?;
        let gate = energy
            .affine(1.0 / GATE_WIDTH, -GATE_THRESHOLD / GATE_WIDTH)?
            .clamp(0.0, 1.0)?;
        Ok((est * gate)?)
    }

    /// Convolutional pitch features `(B, C_f0, T)`.
    pub fn features(&self, mel: &Tensor) -> Result<Tensor> {
        self.check(mel)?;
        let p = |k: &str| self.params[k].to_dtype(mel.dtype());
        let h = leaky(&conv1d(&normalize_mel(mel)?, &p("conv1.weight")?, &p("conv1.bias")?, 2)?)?;
        leaky(&conv1d(&h, &p("conv2.weight")?, &p("conv2.bias")?, 1)?)
    }

    /// `(h_f0, f0_hz)` for a batch.
    pub fn forward(&self, mel: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((self.features(mel)?, self.pitch(mel)?))
    }

    pub fn extract(&self, mel: &MelSpectrogram) -> Result<F0Features> {
        let device = self.params["centres"].device();
        let (h_f0, f0) = self.forward(&mel.to_tensor(device)?)?;
        let f0_hz = f0.squeeze(0)?.to_dtype(DType::F32)?.to_vec1()?;
        Ok(F0Features { h_f0, f0_hz })
    }

    fn check(&self, mel: &Tensor) -> Result<()> {
        let (_, n, _) = mel.dims3()?;
        if n != self.n_bands {
            return invalid(format!("F0 network expects {} bands, got {n}", self.n_bands));
        }
        Ok(())
    }

    pub fn param_hash(&self) -> Result<String> {
        hash_tensors(self.params.iter().map(|(k, v)| (k.as_str(), v)))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        candle::safetensors::save(&self.params, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, device: &Device) -> Result<Self> {
        let path = path.as_ref();
        let params = candle::safetensors::load(path, device)?;
        let bad = |msg: &str| Error::Checkpoint {
            path: path.to_path_buf(),
            msg: msg.to_string(),
        };
        let n_bands = params
            .get("conv1.weight")
            .ok_or_else(|| bad("missing conv1.weight"))?
            .dim(1)?;
        let n_low = params.get("centres").ok_or_else(|| bad("missing centres"))?.dim(0)?;
        Ok(Self { params, n_bands, n_low })
    }

    pub fn channels(&self) -> usize {
        self.params["conv1.weight"].dim(0).unwrap_or(0)
    }
}

/// Median of a pitch track over voiced frames, `None` if nothing is voiced.
pub fn median_voiced(track: &[f32]) -> Option<f32> {
    let mut v: Vec<f32> = track.iter().copied().filter(|&f| f > 0.0).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f32::total_cmp);
    Some(v[v.len() / 2])
}
