use candle::{Device, Module, Tensor};
use candle_nn::{Linear, VarBuilder};

use super::layers::{conv3x3, SameConv2d, leaky, normalize_mel, ResBlock, Scale};
use super::NetworkConfig;
use crate::audio::MelSpectrogram;
use crate::error::{invalid, Result};

/// Speaker-style embedding produced by the style encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleVector {
    values: Vec<f32>,
}

impl StyleVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return invalid("style vector must be nonempty and finite");
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.values, (1, self.values.len()), device)?)
    }

    pub fn cosine(&self, other: &StyleVector) -> f64 {
        let dot: f64 = self.values.iter().zip(&other.values).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let na: f64 = self.values.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = other.values.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt();
        dot / (na * nb).max(1e-12)
    }
}

/// Shared-head style encoder (no per-speaker projections).
#[derive(Debug, Clone)]
pub struct StyleEncoder {
    stem: SameConv2d,
    blocks: Vec<ResBlock>,
    head: Linear,
    n_bands: usize,
    min_frames: usize,
}

impl StyleEncoder {
    pub fn new(cfg: &NetworkConfig, n_bands: usize, vb: VarBuilder) -> Result<Self> {
        cfg.validate(n_bands)?;
        let stem = conv3x3(1, cfg.stage_channels(0), vb.pp("stem"))?;
        let blocks = (0..cfg.n_stages)
            .map(|i| {
                ResBlock::new(
                    cfg.stage_channels(i),
                    cfg.stage_channels(i + 1),
                    Scale::Both,
                    false,
                    vb.pp(format!("block{i}")),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let head = candle_nn::linear(cfg.stage_channels(cfg.n_stages), cfg.style_dim, vb.pp("head"))?;
        Ok(Self {
            stem,
            blocks,
            head,
            n_bands,
            min_frames: 1 << cfg.n_stages,
        })
    }

    /// `(B, N, T)` → `(B, style_dim)`.
    pub fn forward(&self, mel: &Tensor) -> Result<Tensor> {
        let (_, n, t) = mel.dims3()?;
        if n != self.n_bands {
            return invalid(format!("style encoder expects {} bands, got {n}", self.n_bands));
        }
        if t < self.min_frames {
            return invalid(format!("style encoder needs at least {} frames, got {t}", self.min_frames));
        }
        let mut h = self.stem.forward(&normalize_mel(mel)?.unsqueeze(1)?)?;
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        let pooled = leaky(&h)?.mean(3)?.mean(2)?;
        Ok(self.head.forward(&pooled)?)
    }

    pub fn encode(&self, mel: &MelSpectrogram, device: &Device) -> Result<StyleVector> {
        let s = self.forward(&mel.to_tensor(device)?)?;
        StyleVector::new(s.squeeze(0)?.to_dtype(candle::DType::F32)?.to_vec1()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::{init_varmap, stream_rng};
    use candle::DType;
    use candle_nn::VarMap;

    fn build() -> StyleEncoder {
        let vm = VarMap::new();
        let vb = VarBuilder::from_varmap(&vm, DType::F32, &Device::Cpu);
        let s = StyleEncoder::new(&NetworkConfig::default(), 80, vb).unwrap();
        init_varmap(&vm, &mut stream_rng(2, "s")).unwrap();
        s
    }

    fn mel(t: usize, seed: u64) -> MelSpectrogram {
        use rand::Rng;
        let mut rng = stream_rng(seed, "mel");
        let v = (0..80 * t).map(|_| rng.random_range(-10.0..0.0)).collect();
        MelSpectrogram::new(v, 80, t).unwrap()
    }

    #[test]
    fn dimension_and_determinism() {
        let enc = build();
        let m = mel(40, 1);
        let a = enc.encode(&m, &Device::Cpu).unwrap();
        let b = enc.encode(&m, &Device::Cpu).unwrap();
        assert_eq!(a.dim(), 64);
        assert_eq!(a, b);
    }

    #[test]
    fn band_mismatch_is_rejected() {
        let enc = build();
        let m = MelSpectrogram::new(vec![0.0; 40 * 20], 40, 20).unwrap();
        assert!(enc.encode(&m, &Device::Cpu).is_err());
    }
}
