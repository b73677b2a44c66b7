use std::path::Path;

use super::Waveform;
use crate::error::{invalid, Result};

/// Reads a mono PCM WAV (16-bit integer or 32-bit float).
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return invalid(format!(
            "{}: expected mono audio, found {} channels",
            path.display(),
            spec.channels
        ));
    }
    let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()?,
        (fmt, bits) => {
            return invalid(format!(
                "{}: unsupported sample format {fmt:?}/{bits} bits",
                path.display()
            ))
        }
    };
    Waveform::new(samples, spec.sample_rate)
}

/// Writes a mono 32-bit float WAV.
pub fn write_wav(path: impl AsRef<Path>, wav: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wav.sample_rate_hz(),
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in wav.samples() {
        writer.write_sample(s)?;
    }
    writer.finalize()?;
    Ok(())
}
