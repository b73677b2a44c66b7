use candle::{Module, Tensor};
use candle_nn::VarBuilder;

use super::layers::{conv1x1, conv3x3, SameConv2d, denormalize_mel, leaky, normalize_mel, AdainResBlock, ResBlock, Scale};
use super::NetworkConfig;
use crate::error::{invalid, Result};

/// Mel-to-mel generator. The encoder halves the frequency axis at each stage
/// and never touches time, so output length always equals input length.
#[derive(Debug, Clone)]
pub struct Generator {
    stem: SameConv2d,
    encoder: Vec<ResBlock>,
    bottleneck: Vec<AdainResBlock>,
    decoder: Vec<AdainResBlock>,
    out: SameConv2d,
    n_bands: usize,
    f0_channels: usize,
}

impl Generator {
    pub fn new(cfg: &NetworkConfig, n_bands: usize, vb: VarBuilder) -> Result<Self> {
        cfg.validate(n_bands)?;
        let stem = conv3x3(1, cfg.stage_channels(0), vb.pp("stem"))?;
        let encoder = (0..cfg.n_stages)
            .map(|i| {
                ResBlock::new(
                    cfg.stage_channels(i),
                    cfg.stage_channels(i + 1),
                    Scale::Freq,
                    true,
                    vb.pp(format!("enc{i}")),
                )
            })
            .collect::<Result<Vec<_>>>()?;

        let deepest = cfg.stage_channels(cfg.n_stages);
        let mut cin = deepest + cfg.f0_channels;
        let mut bottleneck = Vec::with_capacity(cfg.n_adain_blocks);
        for i in 0..cfg.n_adain_blocks {
            bottleneck.push(AdainResBlock::new(
                cin,
                deepest,
                cfg.style_dim,
                Scale::Keep,
                vb.pp(format!("mid{i}")),
            )?);
            cin = deepest;
        }
        let mut decoder = Vec::with_capacity(cfg.n_stages);
        for i in (0..cfg.n_stages).rev() {
            let cout = cfg.stage_channels(i);
            decoder.push(AdainResBlock::new(
                cin,
                cout,
                cfg.style_dim,
                Scale::Freq,
                vb.pp(format!("dec{i}")),
            )?);
            cin = cout;
        }
        let out = conv1x1(cin, 1, vb.pp("out"))?;
        Ok(Self {
            stem,
            encoder,
            bottleneck,
            decoder,
            out,
            n_bands,
            f0_channels: cfg.f0_channels,
        })
    }

    /// Latent `h_x` of shape `(B, C, F', T)` for a `(B, N, T)` log-mel batch.
    pub fn encode(&self, mel: &Tensor) -> Result<Tensor> {
        let (_, n, _) = mel.dims3()?;
        if n != self.n_bands {
            return invalid(format!("generator expects {} bands, got {n}", self.n_bands));
        }
        let mut h = self.stem.forward(&normalize_mel(mel)?.unsqueeze(1)?)?;
        for block in &self.encoder {
            h = block.forward(&h)?;
        }
        Ok(h)
    }

    /// Decodes `h_x` with pitch features `(B, C_f0, T)` and style `(B, D)`.
    pub fn decode(&self, h_x: &Tensor, h_f0: &Tensor, style: &Tensor) -> Result<Tensor> {
        let (b, _, f, t) = h_x.dims4()?;
        let (bf, cf, tf) = h_f0.dims3()?;
        if tf != t || bf != b || cf != self.f0_channels {
            return invalid(format!(
                "pitch features {:?} do not align with latent {:?}",
                h_f0.dims(),
                h_x.dims()
            ));
        }
        let pitch = h_f0.unsqueeze(2)?.broadcast_as((b, cf, f, t))?.contiguous()?;
        let mut h = Tensor::cat(&[h_x, &pitch], 1)?;
        for block in self.bottleneck.iter().chain(&self.decoder) {
            h = block.forward(&h, style)?;
        }
        let out = self.out.forward(&leaky(&h)?)?.squeeze(1)?;
        denormalize_mel(&out)
    }

    /// `(B, N, T)` source mel, `(B, D)` style, `(B, C_f0, T)` pitch features → `(B, N, T)`.
    pub fn forward(&self, mel: &Tensor, style: &Tensor, h_f0: &Tensor) -> Result<Tensor> {
        let h_x = self.encode(mel)?;
        self.decode(&h_x, h_f0, style)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::{init_varmap, stream_rng};
    use candle::{DType, Device, Var};
    use candle_nn::VarMap;

    fn build() -> (VarMap, Generator) {
        let vm = VarMap::new();
        let vb = VarBuilder::from_varmap(&vm, DType::F32, &Device::Cpu);
        let g = Generator::new(&NetworkConfig::default(), 80, vb).unwrap();
        init_varmap(&vm, &mut stream_rng(1, "g")).unwrap();
        (vm, g)
    }

    #[test]
    fn preserves_shape_for_odd_lengths() {
        let (_, g) = build();
        let dev = Device::Cpu;
        for t in [16, 37, 173] {
            let x = Tensor::randn(-5f32, 2.0, (1, 80, t), &dev).unwrap();
            let s = Tensor::randn(0f32, 1.0, (1, 64), &dev).unwrap();
            let f0 = Tensor::randn(0f32, 1.0, (1, 32, t), &dev).unwrap();
            let y = g.forward(&x, &s, &f0).unwrap();
            assert_eq!(y.dims(), &[1, 80, t]);
        }
    }

    #[test]
    fn rejects_misaligned_pitch() {
        let (_, g) = build();
        let dev = Device::Cpu;
        let x = Tensor::zeros((1, 80, 20), DType::F32, &dev).unwrap();
        let s = Tensor::zeros((1, 64), DType::F32, &dev).unwrap();
        let f0 = Tensor::zeros((1, 32, 19), DType::F32, &dev).unwrap();
        assert!(g.forward(&x, &s, &f0).is_err());
    }

    #[test]
    fn style_gradient_is_live() {
        let (_, g) = build();
        let dev = Device::Cpu;
        let x = Tensor::randn(-5f32, 2.0, (1, 80, 24), &dev).unwrap();
        let s = Var::from_tensor(&Tensor::randn(0f32, 1.0, (1, 64), &dev).unwrap()).unwrap();
        let f0 = Tensor::randn(0f32, 1.0, (1, 32, 24), &dev).unwrap();
        let y = g.forward(&x, s.as_tensor(), &f0).unwrap();
        let grads = y.mean_all().unwrap().backward().unwrap();
        let gs = grads.get(s.as_tensor()).unwrap();
        let norm = gs.sqr().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(norm > 0.0);
    }

    #[test]
    fn different_styles_give_different_outputs() {
        let (_, g) = build();
        let dev = Device::Cpu;
        let x = Tensor::randn(-5f32, 2.0, (1, 80, 24), &dev).unwrap();
        let f0 = Tensor::randn(0f32, 1.0, (1, 32, 24), &dev).unwrap();
        let s1 = Tensor::randn(0f32, 1.0, (1, 64), &dev).unwrap();
        let s2 = Tensor::randn(0f32, 1.0, (1, 64), &dev).unwrap();
        let d = (g.forward(&x, &s1, &f0).unwrap() - g.forward(&x, &s2, &f0).unwrap())
            .unwrap()
            .abs()
            .unwrap()
            .mean_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert!(d > 0.0);
    }
}
