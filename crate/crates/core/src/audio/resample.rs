use std::f64::consts::PI;

use candle::{Tensor, D};

use super::Waveform;
use crate::error::{invalid, Result};

/// Zero crossings of the windowed sinc on each side of the interpolation point.
const ZERO_CROSSINGS: f64 = 16.0;
const ROLLOFF: f64 = 0.95;

/// Precomputed windowed-sinc interpolation taps for one (length, rate pair).
///
/// Each output sample is a fixed linear combination of `taps` input samples,
/// which makes the same kernel usable on plain buffers and, through a gather,
/// on differentiable tensors.
#[derive(Debug, Clone)]
pub struct ResampleKernel {
    in_len: usize,
    out_len: usize,
    taps: usize,
    indices: Vec<u32>,
    weights: Vec<f32>,
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

impl ResampleKernel {
    pub fn new(in_len: usize, source_hz: u32, target_hz: u32) -> Result<Self> {
        if target_hz == 0 || source_hz == 0 {
            return invalid("sample rates must be positive");
        }
        if in_len == 0 {
            return invalid("cannot resample an empty signal");
        }
        let ratio = target_hz as f64 / source_hz as f64;
        let out_len = ((in_len as f64 * ratio).round() as usize).max(1);
        let cutoff = ROLLOFF * ratio.min(1.0);
        let half_width = ZERO_CROSSINGS / cutoff;
        let taps = 2 * half_width.ceil() as usize;
        let first_offset = half_width.ceil() as isize - 1;

        let mut indices = Vec::with_capacity(out_len * taps);
        let mut weights = Vec::with_capacity(out_len * taps);
        for n in 0..out_len {
            let t = n as f64 / ratio;
            let base = t.floor() as isize - first_offset;
            for k in 0..taps {
                let j = base + k as isize;
                let delta = t - j as f64;
                let w = if delta.abs() < half_width && j >= 0 && (j as usize) < in_len {
                    let win = 0.5 + 0.5 * (PI * delta / half_width).cos();
                    cutoff * sinc(cutoff * delta) * win
                } else {
                    0.0
                };
                indices.push(j.clamp(0, in_len as isize - 1) as u32);
                weights.push(w as f32);
            }
        }
        Ok(Self {
            in_len,
            out_len,
            taps,
            indices,
            weights,
        })
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn out_len(&self) -> usize {
        self.out_len
    }

    pub fn apply(&self, x: &[f32]) -> Vec<f32> {
        debug_assert_eq!(x.len(), self.in_len);
        self.indices
            .chunks_exact(self.taps)
            .zip(self.weights.chunks_exact(self.taps))
            .map(|(idx, w)| {
                idx.iter()
                    .zip(w)
                    .map(|(&i, &w)| x[i as usize] as f64 * w as f64)
                    .sum::<f64>() as f32
            })
            .collect()
    }

    /// Resamples the last dimension of a `(batch, in_len)` tensor; differentiable.
    pub fn apply_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l) = x.dims2()?;
        if l != self.in_len {
            return invalid(format!("kernel built for length {}, got {l}", self.in_len));
        }
        let dev = x.device();
        let idx = Tensor::from_slice(&self.indices, self.indices.len(), dev)?;
        let w = Tensor::from_slice(&self.weights, (self.out_len, self.taps), dev)?
            .to_dtype(x.dtype())?;
        let gathered = x
            .index_select(&idx, 1)?
            .reshape((b, self.out_len, self.taps))?;
        Ok(gathered.broadcast_mul(&w)?.sum(D::Minus1)?)
    }
}

/// Band-limited (windowed-sinc) resampling to `target_rate_hz`.
pub fn resample(wav: &Waveform, target_rate_hz: u32) -> Result<Waveform> {
    if target_rate_hz == 0 {
        return invalid("target rate must be positive");
    }
    if target_rate_hz == wav.sample_rate_hz() {
        return Ok(wav.clone());
    }
    let kernel = ResampleKernel::new(wav.len(), wav.sample_rate_hz(), target_rate_hz)?;
    Waveform::new(kernel.apply(wav.samples()), target_rate_hz)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rustfft::num_complex::Complex;
    use rustfft::FftPlanner;

    fn tone(freq: f64, rate: u32, n: usize) -> Waveform {
        let s = (0..n)
            .map(|i| (0.5 * (2.0 * PI * freq * i as f64 / rate as f64).sin()) as f32)
            .collect();
        Waveform::new(s, rate).unwrap()
    }

    // Independent check: locate the peak bin with a plain FFT of the output.
    fn peak_hz(wav: &Waveform) -> (f64, f64) {
        let n = wav.len();
        let mut buf: Vec<Complex<f64>> = wav
            .samples()
            .iter()
            .map(|&s| Complex::new(s as f64, 0.0))
            .collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let bin = (1..n / 2)
            .max_by(|&a, &b| buf[a].norm().total_cmp(&buf[b].norm()))
            .unwrap();
        let bin_hz = wav.sample_rate_hz() as f64 / n as f64;
        (bin as f64 * bin_hz, bin_hz)
    }

    #[test]
    fn length_follows_rate_ratio() {
        let wav = tone(440.0, 22050, 44100);
        let out = resample(&wav, 16000).unwrap();
        assert_eq!(out.len(), 32000);
        assert_eq!(out.sample_rate_hz(), 16000);
    }

    #[test]
    fn same_rate_is_identity() {
        let wav = tone(300.0, 22050, 1000);
        assert_eq!(resample(&wav, 22050).unwrap(), wav);
    }

    #[test]
    fn tone_peak_survives() {
        let wav = tone(440.0, 22050, 44100);
        let out = resample(&wav, 16000).unwrap();
        let (hz, bin) = peak_hz(&out);
        assert!((hz - 440.0).abs() <= bin, "peak at {hz} Hz");
    }

    #[test]
    fn deterministic() {
        let wav = tone(123.0, 22050, 5000);
        let a = resample(&wav, 16000).unwrap();
        let b = resample(&wav, 16000).unwrap();
        assert_eq!(a.samples(), b.samples());
    }

    #[test]
    fn rejects_zero_target() {
        let wav = tone(123.0, 22050, 50);
        assert!(resample(&wav, 0).is_err());
    }

    #[test]
    fn tensor_path_matches_buffer_path() {
        let wav = tone(700.0, 22050, 3000);
        let k = ResampleKernel::new(wav.len(), 22050, 16000).unwrap();
        let a = k.apply(wav.samples());
        let t = wav.to_tensor(&candle::Device::Cpu).unwrap();
        let b: Vec<f32> = k.apply_tensor(&t).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn interior_amplitude_is_preserved() {
        let wav = tone(200.0, 22050, 22050);
        let out = resample(&wav, 16000).unwrap();
        let interior = &out.samples()[1000..15000];
        let peak = interior.iter().fold(0.0f32, |m, s| m.max(s.abs()));
        assert!((peak - 0.5).abs() < 0.01, "peak {peak}");
    }
}
