use candle::{Module, Tensor, D};
use candle_nn::{Linear, VarBuilder};

use crate::error::{invalid, Result};

/// Added (in quadrature) to the per-channel standard deviation.
pub const STD_EPS: f64 = 1e-8;

/// Normalizes each `(batch, channel)` slice of `x` over all trailing axes to
/// zero mean and unit (biased) variance.
pub fn instance_norm(x: &Tensor) -> Result<Tensor> {
    if x.rank() < 3 {
        return invalid(format!("instance_norm needs (B, C, ...), got {:?}", x.shape()));
    }
    let dims = x.dims().to_vec();
    let (b, c) = (dims[0], dims[1]);
    let flat = x.reshape((b, c, ()))?;
    let mean = flat.mean_keepdim(D::Minus1)?;
    let centred = flat.broadcast_sub(&mean)?;
    let var = centred.sqr()?.mean_keepdim(D::Minus1)?;
    let std = (var + STD_EPS * STD_EPS)?.sqrt()?;
    Ok(centred.broadcast_div(&std)?.reshape(dims)?)
}

/// `gamma · norm(x) + beta`, with `gamma`, `beta` of shape `(B, C)`.
pub fn adain(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let (b, c) = (dims[0], dims[1]);
    if gamma.dims() != [b, c] || beta.dims() != [b, c] {
        return invalid(format!(
            "AdaIN parameters must be ({b}, {c}); got {:?} and {:?}",
            gamma.dims(),
            beta.dims()
        ));
    }
    let mut bshape = vec![b, c];
    bshape.extend(std::iter::repeat_n(1, dims.len() - 2));
    let normed = instance_norm(x)?;
    Ok(normed
        .broadcast_mul(&gamma.reshape(bshape.as_slice())?)?
        .broadcast_add(&beta.reshape(bshape.as_slice())?)?)
}

/// AdaIN site: a learned linear map from the style vector to `(1 + gamma, beta)`.
#[derive(Debug, Clone)]
pub struct AdaIn {
    fc: Linear,
    channels: usize,
}

impl AdaIn {
    pub fn new(style_dim: usize, channels: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            fc: candle_nn::linear(style_dim, 2 * channels, vb.pp("fc"))?,
            channels,
        })
    }

    pub fn forward(&self, x: &Tensor, style: &Tensor) -> Result<Tensor> {
        let h = self.fc.forward(style)?;
        let gamma = (h.narrow(1, 0, self.channels)? + 1.0)?;
        let beta = h.narrow(1, self.channels, self.channels)?;
        adain(x, &gamma, &beta)
    }
}
