//! Adversarial critics: the speaker-conditional mel discriminator, the
//! unconditional SLM-feature discriminator and the SLM source classifier.

use candle::{DType, Device, Module, Tensor, D};
use candle_nn::{Conv2d, Conv2dConfig, Linear, VarBuilder};

use crate::audio::{SpeakerId, Waveform};
use crate::error::{invalid, Error, Result};
use crate::nets::layers::{conv1x1, conv3x3, leaky, normalize_mel, pad_to_multiple, PaddedConv1d, SameConv2d};
use crate::nets::NetworkConfig;
use crate::slm::{ProjectionHead, SlmBackbone, SlmFeatureStack, PROJECTED_DIM};

fn critic_width(cfg: &NetworkConfig, layer: usize) -> usize {
    (cfg.critic_channels << layer).min(4 * cfg.critic_channels)
}

/// Labels as a `(B,)` u32 tensor, checked against `n_classes`.
pub fn label_tensor(labels: &[SpeakerId], n_classes: usize, device: &Device) -> Result<Tensor> {
    let idx = labels
        .iter()
        .map(|y| {
            if y.index() < n_classes {
                Ok(y.index() as u32)
            } else {
                Err(Error::Index {
                    what: "speaker label",
                    index: y.index(),
                    len: n_classes,
                })
            }
        })
        .collect::<Result<Vec<u32>>>()?;
    Ok(Tensor::from_vec(idx, labels.len(), device)?)
}

/// Spatial mean of channel `y[b]` of each `(B, S, H, W)` output map → `(B,)`.
pub fn select_score(map: &Tensor, labels: &Tensor) -> Result<Tensor> {
    let (b, s, _, _) = map.dims4()?;
    let per_class = map.mean(3)?.mean(2)?;
    let idx: Vec<u32> = labels.to_dtype(DType::U32)?.to_vec1()?;
    if idx.len() != b {
        return invalid(format!("{} labels for a batch of {b}", idx.len()));
    }
    if let Some(&bad) = idx.iter().find(|&&i| i as usize >= s) {
        return Err(Error::Index {
            what: "discriminator channel",
            index: bad as usize,
            len: s,
        });
    }
    Ok(per_class.gather(&labels.to_dtype(DType::U32)?.unsqueeze(1)?, 1)?.squeeze(1)?)
}

/// Speaker-conditional critic over log-mel input, one output channel per
/// training speaker.
#[derive(Debug, Clone)]
pub struct MelDiscriminator {
    stem: SameConv2d,
    layers: Vec<Conv2d>,
    head: SameConv2d,
    n_speakers: usize,
    n_bands: usize,
}

impl MelDiscriminator {
    pub fn new(cfg: &NetworkConfig, n_bands: usize, n_speakers: usize, vb: VarBuilder) -> Result<Self> {
        let stem = conv3x3(1, cfg.critic_channels, vb.pp("stem"))?;
        let strided = Conv2dConfig {
            padding: 1,
            stride: 2,
            ..Default::default()
        };
        let mut layers = Vec::with_capacity(cfg.critic_layers);
        let mut cin = cfg.critic_channels;
        for i in 0..cfg.critic_layers {
            let cout = critic_width(cfg, i);
            layers.push(candle_nn::conv2d(cin, cout, 3, strided, vb.pp(format!("conv{i}")))?);
            cin = cout;
        }
        let head = conv1x1(cin, n_speakers, vb.pp("head"))?;
        Ok(Self {
            stem,
            layers,
            head,
            n_speakers,
            n_bands,
        })
    }

    pub fn n_speakers(&self) -> usize {
        self.n_speakers
    }

    /// `(B, N, T)` → `(B, S, H, W)` output map.
    pub fn output_map(&self, mel: &Tensor) -> Result<Tensor> {
        let (_, n, _) = mel.dims3()?;
        if n != self.n_bands {
            return invalid(format!("mel critic expects {} bands, got {n}", self.n_bands));
        }
        // Both axes are padded to a multiple of 2^layers so every strided
        // layer sees even sizes; candle's conv2d backward derives the output
        // padding from the height alone and breaks on mixed parity.
        let m = 1 << self.layers.len();
        let x = pad_to_multiple(&pad_to_multiple(&normalize_mel(mel)?.unsqueeze(1)?, 2, m)?, 3, m)?;
        let mut h = leaky(&self.stem.forward(&x)?)?;
        for l in &self.layers {
            h = leaky(&l.forward(&h)?)?;
        }
        Ok(self.head.forward(&h)?)
    }

    /// `(B,)` scores for speakers `labels` (`(B,)` u32).
    pub fn score(&self, mel: &Tensor, labels: &Tensor) -> Result<Tensor> {
        select_score(&self.output_map(mel)?, labels)
    }
}

/// Strided 1-D convolution stack over the projected `(B, T', 256)` map.
#[derive(Debug, Clone)]
struct SlmConvStack {
    layers: Vec<PaddedConv1d>,
    out_channels: usize,
}

impl SlmConvStack {
    fn new(cfg: &NetworkConfig, vb: VarBuilder) -> Result<Self> {
        let mut cin = PROJECTED_DIM;
        let mut layers = Vec::with_capacity(cfg.critic_layers);
        for i in 0..cfg.critic_layers {
            let cout = critic_width(cfg, i);
            layers.push(PaddedConv1d::new(cin, cout, 5, 2, 2, vb.pp(format!("conv{i}")))?);
            cin = cout;
        }
        Ok(Self {
            layers,
            out_channels: cin,
        })
    }

    fn forward(&self, projected: &Tensor) -> Result<Tensor> {
        let mut h = projected.transpose(1, 2)?.contiguous()?;
        for l in &self.layers {
            h = leaky(&l.forward(&h)?)?;
        }
        Ok(h)
    }
}

/// Unconditional real/fake critic on SLM features.
#[derive(Debug, Clone)]
pub struct SlmDiscriminator {
    head: ProjectionHead,
    convs: SlmConvStack,
    out: PaddedConv1d,
}

impl SlmDiscriminator {
    pub fn new(cfg: &NetworkConfig, vb: VarBuilder) -> Result<Self> {
        let convs = SlmConvStack::new(cfg, vb.pp("convs"))?;
        Ok(Self {
            head: ProjectionHead::new(vb.pp("proj"))?,
            out: PaddedConv1d::new(convs.out_channels, 1, 3, 1, 1, vb.pp("out"))?,
            convs,
        })
    }

    pub fn projection_head(&self) -> &ProjectionHead {
        &self.head
    }

    /// `(B, 1, T'')` output map.
    pub fn output_map(&self, stack: &SlmFeatureStack) -> Result<Tensor> {
        let h = self.convs.forward(&self.head.project(stack)?)?;
        Ok(self.out.forward(&h)?)
    }

    /// `(B,)` scores.
    pub fn score(&self, stack: &SlmFeatureStack) -> Result<Tensor> {
        Ok(self.output_map(stack)?.mean(D::Minus1)?.squeeze(1)?)
    }

    /// Score of a single waveform (resampled to 16 kHz by the backbone).
    pub fn score_wav(&self, backbone: &SlmBackbone, wav: &Waveform, device: &Device) -> Result<f64> {
        let s = self.score(&backbone.extract(wav, device)?)?;
        Ok(s.squeeze(0)?.to_dtype(DType::F64)?.to_scalar()?)
    }
}

/// Source-speaker classifier on SLM features.
#[derive(Debug, Clone)]
pub struct SourceClassifier {
    head: ProjectionHead,
    convs: SlmConvStack,
    logits: Linear,
    n_speakers: usize,
}

impl SourceClassifier {
    pub fn new(cfg: &NetworkConfig, n_speakers: usize, vb: VarBuilder) -> Result<Self> {
        let convs = SlmConvStack::new(cfg, vb.pp("convs"))?;
        Ok(Self {
            head: ProjectionHead::new(vb.pp("proj"))?,
            logits: candle_nn::linear(convs.out_channels, n_speakers, vb.pp("logits"))?,
            convs,
            n_speakers,
        })
    }

    pub fn n_speakers(&self) -> usize {
        self.n_speakers
    }

    pub fn projection_head(&self) -> &ProjectionHead {
        &self.head
    }

    /// `(B, S)` logits.
    pub fn logits(&self, stack: &SlmFeatureStack) -> Result<Tensor> {
        let h = self.convs.forward(&self.head.project(stack)?)?;
        Ok(self.logits.forward(&h.mean(D::Minus1)?)?)
    }

    pub fn classify(&self, backbone: &SlmBackbone, wav: &Waveform, device: &Device) -> Result<Vec<f32>> {
        let l = self.logits(&backbone.extract(wav, device)?)?;
        Ok(l.squeeze(0)?.to_dtype(DType::F32)?.to_vec1()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::{init_varmap, stream_rng};
    use candle_nn::VarMap;

    #[test]
    fn select_score_reads_only_the_labelled_channel() {
        let dev = Device::Cpu;
        let mut v = vec![0.0f32; 2 * 3 * 2 * 2];
        // batch 0, channel 1 = 0.75 everywhere; everything else noise.
        for (i, x) in v.iter_mut().enumerate() {
            *x = (i as f32 * 0.37).sin();
        }
        for k in 0..4 {
            v[4 + k] = 0.75;
        }
        let map = Tensor::from_vec(v.clone(), (2, 3, 2, 2), &dev).unwrap();
        let labels = Tensor::new(&[1u32, 2], &dev).unwrap();
        let s = select_score(&map, &labels).unwrap().to_vec1::<f32>().unwrap();
        assert!((s[0] - 0.75).abs() < 1e-7);

        // Altering any other channel of batch 0 leaves its score alone.
        for k in 0..4 {
            v[k] += 10.0;
            v[8 + k] -= 3.0;
        }
        let map2 = Tensor::from_vec(v, (2, 3, 2, 2), &dev).unwrap();
        let s2 = select_score(&map2, &labels).unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(s[0], s2[0]);
    }

    #[test]
    fn select_score_rejects_bad_label() {
        let dev = Device::Cpu;
        let map = Tensor::zeros((1, 2, 1, 1), DType::F32, &dev).unwrap();
        let labels = Tensor::new(&[2u32], &dev).unwrap();
        assert!(matches!(select_score(&map, &labels), Err(Error::Index { .. })));
    }

    #[test]
    fn mel_critic_channels_are_independent() {
        let dev = Device::Cpu;
        let vm = VarMap::new();
        let vb = VarBuilder::from_varmap(&vm, DType::F32, &dev);
        let d = MelDiscriminator::new(&NetworkConfig::default(), 80, 4, vb).unwrap();
        init_varmap(&vm, &mut stream_rng(3, "d")).unwrap();
        let mel = Tensor::randn(-5f32, 2.0, (1, 80, 30), &dev).unwrap();
        let a = d.score(&mel, &Tensor::new(&[0u32], &dev).unwrap()).unwrap();
        let b = d.score(&mel, &Tensor::new(&[3u32], &dev).unwrap()).unwrap();
        let (a, b) = (a.to_vec1::<f32>().unwrap()[0], b.to_vec1::<f32>().unwrap()[0]);
        assert!(a.is_finite() && b.is_finite());
        assert_ne!(a, b);
        assert_eq!(d.output_map(&mel).unwrap().dim(1).unwrap(), 4);
    }

    #[test]
    fn classifier_logit_count_matches_roster() {
        let dev = Device::Cpu;
        let vm = VarMap::new();
        let vb = VarBuilder::from_varmap(&vm, DType::F32, &dev);
        let c = SourceClassifier::new(&NetworkConfig::default(), 4, vb).unwrap();
        init_varmap(&vm, &mut stream_rng(4, "c")).unwrap();
        let bb = SlmBackbone::new(&dev).unwrap();
        let wav = crate::synth::tone(200.0, 0.25, 22050, 0.3);
        let logits = c.classify(&bb, &wav, &dev).unwrap();
        assert_eq!(logits.len(), 4);
    }
}
