use candle::{Module, Tensor};
use candle_nn::{Conv1d, Conv1dConfig, VarBuilder};

use super::adain::{instance_norm, AdaIn};
use super::{LEAKY_SLOPE, MEL_MEAN, MEL_STD};
use crate::error::Result;

pub(crate) fn leaky(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::leaky_relu(x, LEAKY_SLOPE)?)
}

pub(crate) fn normalize_mel(x: &Tensor) -> Result<Tensor> {
    Ok(x.affine(1.0 / MEL_STD, -MEL_MEAN / MEL_STD)?)
}

pub(crate) fn denormalize_mel(x: &Tensor) -> Result<Tensor> {
    Ok(x.affine(MEL_STD, MEL_MEAN)?)
}

/// Stride-1 "same" 2-D convolution computed as im2col + matmul, which is
/// markedly faster than the direct kernel on CPU, forward and backward.
/// Parameter names and layout match `candle_nn::Conv2d`.
#[derive(Debug, Clone)]
pub(crate) struct SameConv2d {
    weight: Tensor,
    bias: Tensor,
    k: usize,
}

impl SameConv2d {
    pub fn new(cin: usize, cout: usize, k: usize, vb: VarBuilder) -> Result<Self> {
        debug_assert!(k % 2 == 1, "same padding needs an odd kernel");
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        let init = candle_nn::Init::Uniform { lo: -bound, up: bound };
        Ok(Self {
            weight: vb.get_with_hints((cout, cin, k, k), "weight", init)?,
            bias: vb.get_with_hints(cout, "bias", candle_nn::Init::Const(0.0))?,
            k,
        })
    }
}

impl Module for SameConv2d {
    fn forward(&self, x: &Tensor) -> candle::Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (co, k) = (self.weight.dim(0)?, self.k);
        let cols = if k == 1 {
            x.reshape((b, c, h * w))?
        } else {
            let p = k / 2;
            let padded = x.pad_with_zeros(2, p, p)?.pad_with_zeros(3, p, p)?;
            let mut taps = Vec::with_capacity(k * k);
            for i in 0..k {
                for j in 0..k {
                    taps.push(padded.narrow(2, i, h)?.narrow(3, j, w)?);
                }
            }
            Tensor::stack(&taps, 2)?.reshape((b, c * k * k, h * w))?
        };
        let wm = self.weight.reshape((co, c * k * k))?;
        wm.broadcast_matmul(&cols)?
            .broadcast_add(&self.bias.reshape((1, co, 1))?)?
            .reshape((b, co, h, w))
    }
}

pub(crate) fn conv3x3(cin: usize, cout: usize, vb: VarBuilder) -> Result<SameConv2d> {
    SameConv2d::new(cin, cout, 3, vb)
}

pub(crate) fn conv1x1(cin: usize, cout: usize, vb: VarBuilder) -> Result<SameConv2d> {
    SameConv2d::new(cin, cout, 1, vb)
}

/// 1-D convolution that zero-pads its input explicitly. candle's conv1d
/// backward underflows on short inputs when the padding is left to the kernel.
#[derive(Debug, Clone)]
pub(crate) struct PaddedConv1d {
    conv: Conv1d,
    padding: usize,
}

impl PaddedConv1d {
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, padding: usize, vb: VarBuilder) -> Result<Self> {
        let cfg = Conv1dConfig {
            stride,
            ..Default::default()
        };
        Ok(Self {
            conv: candle_nn::conv1d(cin, cout, k, cfg, vb)?,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = if self.padding > 0 {
            x.pad_with_zeros(2, self.padding, self.padding)?
        } else {
            x.clone()
        };
        Ok(self.conv.forward(&x)?)
    }
}

/// Spatial resampling applied inside residual blocks, on `(B, C, F, T)` maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Scale {
    Keep,
    /// Halve (or double) the frequency axis only; time length is preserved.
    Freq,
    /// Halve both axes.
    Both,
}

/// Drops a trailing odd row/column so 2× pooling covers the map exactly
/// (pooling backward assumes an exact tiling).
fn even(x: &Tensor, dim: usize) -> Result<Tensor> {
    let n = x.dim(dim)?;
    Ok(if n % 2 == 1 { x.narrow(dim, 0, n - 1)? } else { x.clone() })
}

/// Zero-pads `dim` on the right up to a multiple of `m`.
pub(crate) fn pad_to_multiple(x: &Tensor, dim: usize, m: usize) -> Result<Tensor> {
    let n = x.dim(dim)?;
    let extra = (m - n % m) % m;
    Ok(if extra > 0 { x.pad_with_zeros(dim, 0, extra)? } else { x.clone() })
}

fn down(x: &Tensor, scale: Scale) -> Result<Tensor> {
    Ok(match scale {
        Scale::Keep => x.clone(),
        Scale::Freq => even(x, 2)?.avg_pool2d_with_stride((2, 1), (2, 1))?,
        Scale::Both => even(&even(x, 2)?, 3)?.avg_pool2d(2)?,
    })
}

fn up(x: &Tensor, scale: Scale) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    Ok(match scale {
        Scale::Keep => x.clone(),
        // Nearest-neighbour doubling along frequency only, built from
        // broadcast + reshape so it stays differentiable.
        Scale::Freq => {
            let (b, c, _, _) = x.dims4()?;
            x.unsqueeze(3)?.broadcast_as((b, c, h, 2, w))?.contiguous()?.reshape((b, c, 2 * h, w))?
        }
        Scale::Both => x.upsample_nearest2d(2 * h, 2 * w)?,
    })
}

/// Pre-activation residual block with optional instance norm and downsampling.
#[derive(Debug, Clone)]
pub(crate) struct ResBlock {
    conv1: SameConv2d,
    conv2: SameConv2d,
    shortcut: Option<SameConv2d>,
    scale: Scale,
    normalize: bool,
}

impl ResBlock {
    pub fn new(cin: usize, cout: usize, scale: Scale, normalize: bool, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            conv1: conv3x3(cin, cin, vb.pp("conv1"))?,
            conv2: conv3x3(cin, cout, vb.pp("conv2"))?,
            shortcut: (cin != cout)
                .then(|| conv1x1(cin, cout, vb.pp("sc")))
                .transpose()?,
            scale,
            normalize,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let sc = match &self.shortcut {
            Some(c) => c.forward(x)?,
            None => x.clone(),
        };
        let sc = down(&sc, self.scale)?;

        let mut h = x.clone();
        if self.normalize {
            h = instance_norm(&h)?;
        }
        h = self.conv1.forward(&leaky(&h)?)?;
        h = down(&h, self.scale)?;
        if self.normalize {
            h = instance_norm(&h)?;
        }
        h = self.conv2.forward(&leaky(&h)?)?;
        Ok(((sc + h)? * std::f64::consts::FRAC_1_SQRT_2)?)
    }
}

/// Residual block with two AdaIN sites and optional upsampling.
#[derive(Debug, Clone)]
pub(crate) struct AdainResBlock {
    norm1: AdaIn,
    norm2: AdaIn,
    conv1: SameConv2d,
    conv2: SameConv2d,
    shortcut: Option<SameConv2d>,
    scale: Scale,
}

impl AdainResBlock {
    pub fn new(cin: usize, cout: usize, style_dim: usize, scale: Scale, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            norm1: AdaIn::new(style_dim, cin, vb.pp("norm1"))?,
            norm2: AdaIn::new(style_dim, cout, vb.pp("norm2"))?,
            conv1: conv3x3(cin, cout, vb.pp("conv1"))?,
            conv2: conv3x3(cout, cout, vb.pp("conv2"))?,
            shortcut: (cin != cout)
                .then(|| conv1x1(cin, cout, vb.pp("sc")))
                .transpose()?,
            scale,
        })
    }

    pub fn forward(&self, x: &Tensor, style: &Tensor) -> Result<Tensor> {
        let sc = up(x, self.scale)?;
        let sc = match &self.shortcut {
            Some(c) => c.forward(&sc)?,
            None => sc,
        };
        let mut h = leaky(&self.norm1.forward(x, style)?)?;
        h = up(&h, self.scale)?;
        h = self.conv1.forward(&h)?;
        h = leaky(&self.norm2.forward(&h, style)?)?;
        h = self.conv2.forward(&h)?;
        Ok(((sc + h)? * std::f64::consts::FRAC_1_SQRT_2)?)
    }
}
