//! Synthetic "speakers" and test tones.
//!
//! Each speaker is a harmonic source at its own mean pitch, shaped by vowel
//! formants scaled by a per-speaker vocal-tract factor. Utterances are random
//! vowel sequences with pauses, so they carry speech/silence structure.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{write_wav, Waveform};
use crate::error::Result;
use crate::util::stream_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpeaker {
    pub name: String,
    pub f0_hz: f64,
    pub formant_scale: f64,
}

/// Vowel formants (F1, F2, F3) in Hz.
const VOWELS: [[f64; 3]; 5] = [
    [730.0, 1090.0, 2440.0],
    [270.0, 2290.0, 3010.0],
    [300.0, 870.0, 2240.0],
    [530.0, 1840.0, 2480.0],
    [570.0, 840.0, 2410.0],
];

/// `n` speakers with pitches spread over 100–280 Hz and distinct formant scales.
pub fn roster(n: usize) -> Vec<SyntheticSpeaker> {
    (0..n)
        .map(|i| {
            let frac = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
            SyntheticSpeaker {
                name: format!("spk{i:02}"),
                f0_hz: 100.0 * 2.8f64.powf(frac),
                formant_scale: 0.85 + 0.35 * frac,
            }
        })
        .collect()
}

pub fn tone(freq_hz: f64, seconds: f64, sample_rate_hz: u32, amplitude: f64) -> Waveform {
    let n = ((seconds * sample_rate_hz as f64).round() as usize).max(1);
    let samples = (0..n)
        .map(|i| (amplitude * (2.0 * PI * freq_hz * i as f64 / sample_rate_hz as f64).sin()) as f32)
        .collect();
    Waveform::new(samples, sample_rate_hz).expect("tone is finite and nonempty")
}

fn formant_gain(freq: f64, formants: &[f64; 3], scale: f64) -> f64 {
    formants
        .iter()
        .enumerate()
        .map(|(k, &f)| {
            let centre = f * scale;
            let bw = 80.0 + 40.0 * k as f64;
            let amp = 1.0 / (1.0 + k as f64);
            amp * (-0.5 * ((freq - centre) / bw).powi(2)).exp()
        })
        .sum::<f64>()
        + 0.02
}

/// One utterance of `speaker`, fully determined by `seed`.
pub fn utterance(speaker: &SyntheticSpeaker, seconds: f64, sample_rate_hz: u32, seed: u64) -> Waveform {
    let mut rng = stream_rng(seed, &speaker.name);
    let sr = sample_rate_hz as f64;
    let n = ((seconds * sr).round() as usize).max(1);
    let mut out = vec![0.0f32; n];

    let contour_rate = rng.random_range(0.4..1.2);
    let contour_phase = rng.random_range(0.0..2.0 * PI);
    let nyquist = sr / 2.0;

    let mut pos = (rng.random_range(0.02..0.12) * sr) as usize;
    let mut phase = 0.0f64;
    while pos < n {
        let syl_len = (rng.random_range(0.18..0.35) * sr) as usize;
        let vowel = VOWELS[rng.random_range(0..VOWELS.len())];
        let jitter = rng.random_range(0.95..1.05);
        let end = (pos + syl_len).min(n);
        for (i, slot) in out.iter_mut().enumerate().take(end).skip(pos) {
            let t = i as f64 / sr;
            let f0 = speaker.f0_hz * jitter * (1.0 + 0.06 * (2.0 * PI * contour_rate * t + contour_phase).sin());
            phase += 2.0 * PI * f0 / sr;
            let local = (i - pos) as f64 / syl_len as f64;
            let env = (PI * local).sin().powf(0.6);
            let mut s = 0.0;
            let mut h = 1;
            while (h as f64) * f0 < nyquist.min(5000.0) {
                let fh = h as f64 * f0;
                s += formant_gain(fh, &vowel, speaker.formant_scale) * (h as f64 * phase).sin() / (h as f64).sqrt();
                h += 1;
            }
            *slot = (0.25 * env * s) as f32;
        }
        pos = end + (rng.random_range(0.04..0.15) * sr) as usize;
    }
    Waveform::new(out, sample_rate_hz).expect("synthetic audio is finite")
}

/// Writes `<dir>/<speaker>/utt_<k>.wav` for every speaker; returns the paths.
pub fn write_corpus(
    dir: impl AsRef<Path>,
    speakers: &[SyntheticSpeaker],
    utterances_per_speaker: usize,
    seconds: f64,
    sample_rate_hz: u32,
    seed: u64,
) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for (si, spk) in speakers.iter().enumerate() {
        let spk_dir = dir.as_ref().join(&spk.name);
        std::fs::create_dir_all(&spk_dir)?;
        for k in 0..utterances_per_speaker {
            let utt_seed = seed
                .wrapping_mul(1_000_003)
                .wrapping_add((si * 10_007 + k) as u64);
            let wav = utterance(spk, seconds, sample_rate_hz, utt_seed);
            let p = spk_dir.join(format!("utt_{k:03}.wav"));
            write_wav(&p, &wav)?;
            paths.push(p);
        }
    }
    Ok(paths)
}
