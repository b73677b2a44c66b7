use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{AudioConfig, MelSpectrogram, Waveform};
use crate::error::{config, Result};

fn hz_to_mel(hz: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if hz < MIN_LOG_HZ {
        hz / F_SP
    } else {
        min_log_mel + (hz / MIN_LOG_HZ).ln() / logstep
    }
}

fn mel_to_hz(mel: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if mel < min_log_mel {
        mel * F_SP
    } else {
        MIN_LOG_HZ * (logstep * (mel - min_log_mel)).exp()
    }
}

/// Slaney-style mel filterbank (area-normalized triangles), `n_mel_bands × (fft_size/2+1)`,
/// spanning 0 Hz to Nyquist. Also returns the centre frequency of each band.
pub fn mel_filterbank(cfg: &AudioConfig) -> (Vec<Vec<f64>>, Vec<f64>) {
    let n_freqs = cfg.n_freqs();
    let sr = cfg.sample_rate_hz as f64;
    let fft_freqs: Vec<f64> = (0..n_freqs)
        .map(|j| j as f64 * sr / cfg.fft_size as f64)
        .collect();
    let mel_max = hz_to_mel(sr / 2.0);
    let n_points = cfg.n_mel_bands + 2;
    let edges: Vec<f64> = (0..n_points)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_points - 1) as f64))
        .collect();

    let mut bank = vec![vec![0.0; n_freqs]; cfg.n_mel_bands];
    for (i, row) in bank.iter_mut().enumerate() {
        let (lo, mid, hi) = (edges[i], edges[i + 1], edges[i + 2]);
        let enorm = 2.0 / (hi - lo);
        for (w, &f) in row.iter_mut().zip(&fft_freqs) {
            let lower = (f - lo) / (mid - lo);
            let upper = (hi - f) / (hi - mid);
            *w = lower.min(upper).max(0.0) * enorm;
        }
    }
    let centres = edges[1..=cfg.n_mel_bands].to_vec();
    (bank, centres)
}

/// Periodic Hann window of `window_length`, zero-padded (centred) to `fft_size`.
pub(crate) fn padded_hann(cfg: &AudioConfig) -> Vec<f64> {
    let mut w = vec![0.0; cfg.fft_size];
    let offset = (cfg.fft_size - cfg.window_length) / 2;
    for i in 0..cfg.window_length {
        w[offset + i] = 0.5 - 0.5 * (2.0 * PI * i as f64 / cfg.window_length as f64).cos();
    }
    w
}

/// Reusable STFT + mel projection for one [`AudioConfig`].
pub struct MelAnalyzer {
    cfg: AudioConfig,
    window: Vec<f64>,
    bank: Vec<Vec<f64>>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for MelAnalyzer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelAnalyzer").field("cfg", &self.cfg).finish()
    }
}

impl MelAnalyzer {
    pub fn new(cfg: &AudioConfig) -> Result<Self> {
        cfg.validate()?;
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
        Ok(Self {
            cfg: cfg.clone(),
            window: padded_hann(cfg),
            bank: mel_filterbank(cfg).0,
            fft,
        })
    }

    pub fn config(&self) -> &AudioConfig {
        &self.cfg
    }

    pub fn analyze(&self, wav: &Waveform) -> Result<MelSpectrogram> {
        let cfg = &self.cfg;
        if wav.sample_rate_hz() != cfg.sample_rate_hz {
            return config(format!(
                "waveform rate {} Hz does not match configured {} Hz",
                wav.sample_rate_hz(),
                cfg.sample_rate_hz
            ));
        }
        let x = wav.samples();
        let n_fft = cfg.fft_size;
        let pad = n_fft / 2;
        let n_frames = cfg.n_frames(x.len());
        let n_freqs = cfg.n_freqs();
        let n_bands = cfg.n_mel_bands;

        let mut values = vec![0.0f32; n_bands * n_frames];
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        let mut mag = vec![0.0f64; n_freqs];
        for t in 0..n_frames {
            let start = (t * cfg.hop_length) as isize - pad as isize;
            for (k, slot) in buf.iter_mut().enumerate() {
                let idx = start + k as isize;
                let s = if idx >= 0 && (idx as usize) < x.len() {
                    x[idx as usize] as f64
                } else {
                    0.0
                };
                *slot = Complex::new(s * self.window[k], 0.0);
            }
            self.fft.process(&mut buf);
            for (m, c) in mag.iter_mut().zip(&buf) {
                *m = c.norm();
            }
            for (n, row) in self.bank.iter().enumerate() {
                let e: f64 = row.iter().zip(&mag).map(|(w, m)| w * m).sum();
                values[n * n_frames + t] = e.max(cfg.log_floor).ln() as f32;
            }
        }
        MelSpectrogram::new(values, n_bands, n_frames)
    }
}

/// Log-mel analysis with centred, zero-padded framing.
pub fn compute_mel(wav: &Waveform, cfg: &AudioConfig) -> Result<MelSpectrogram> {
    MelAnalyzer::new(cfg)?.analyze(wav)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn silence_hits_the_floor() {
        let cfg = AudioConfig::default();
        let wav = Waveform::new(vec![0.0; 22050], 22050).unwrap();
        let mel = compute_mel(&wav, &cfg).unwrap();
        let floor = (1e-5f64).ln() as f32;
        assert!(mel.values().iter().all(|&v| v == floor));
        assert_eq!(mel.n_bands(), 80);
    }

    #[test]
    fn two_seconds_gives_173_frames() {
        let cfg = AudioConfig::default();
        let wav = Waveform::new(vec![0.1; 44100], 22050).unwrap();
        let mel = compute_mel(&wav, &cfg).unwrap();
        assert_eq!(mel.n_frames(), 173);
        assert_eq!(mel.n_bands(), 80);
    }

    #[test]
    fn rate_mismatch_is_config_error() {
        let wav = Waveform::new(vec![0.0; 100], 16000).unwrap();
        let err = compute_mel(&wav, &AudioConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn tone_energy_peaks_near_its_band() {
        let cfg = AudioConfig::default();
        let sr = cfg.sample_rate_hz as f64;
        let samples: Vec<f32> = (0..22050)
            .map(|i| (0.5 * (2.0 * PI * 1000.0 * i as f64 / sr).sin()) as f32)
            .collect();
        let mel = compute_mel(&Waveform::new(samples, 22050).unwrap(), &cfg).unwrap();
        let (_, centres) = mel_filterbank(&cfg);
        let t = mel.n_frames() / 2;
        let best = (0..mel.n_bands())
            .max_by(|&a, &b| mel.get(a, t).total_cmp(&mel.get(b, t)))
            .unwrap();
        assert!((centres[best] - 1000.0).abs() < 100.0, "peak at {}", centres[best]);
    }

    #[test]
    fn filterbank_rows_are_nonnegative_and_nonempty() {
        let (bank, centres) = mel_filterbank(&AudioConfig::default());
        assert_eq!(bank.len(), 80);
        assert!(centres.windows(2).all(|w| w[0] < w[1]));
        for row in &bank {
            assert!(row.iter().all(|&w| w >= 0.0));
            assert!(row.iter().any(|&w| w > 0.0));
        }
    }
}
