//! Training objectives.
//!
//! Every L1-type distance is reduced as a mean over all elements (and hence
//! over the batch). Inputs are batched tensors; each function returns a scalar
//! tensor so it can be weighted and back-propagated.

use std::collections::BTreeMap;

use candle::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::audio::SpeakerId;
use crate::critics::label_tensor;
use crate::error::{invalid, Result};
use crate::slm::{SlmBackbone, SlmFeatureStack};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub cls: f64,
    pub advcls: f64,
    pub sty: f64,
    pub f0: f64,
    pub slm: f64,
    pub norm: f64,
    pub cyc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 0.1,
            advcls: 0.5,
            sty: 1.0,
            f0: 5.0,
            slm: 1.0,
            norm: 1.0,
            cyc: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.cls, self.advcls, self.sty, self.f0, self.slm, self.norm, self.cyc];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return invalid("loss weights must be finite and nonnegative");
        }
        Ok(())
    }

    /// Coefficient of each generator term, the adversarial term fixed at 1.
    pub fn generator_coefficients(&self) -> [(&'static str, f64); 7] {
        [
            ("adv", 1.0),
            ("advcls", self.advcls),
            ("sty", self.sty),
            ("f0", self.f0),
            ("slm", self.slm),
            ("norm", self.norm),
            ("cyc", self.cyc),
        ]
    }
}

/// Per-step loss values for logging.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub terms: BTreeMap<String, f64>,
    pub total_g: f64,
    pub total_d: f64,
}

impl LossReport {
    pub fn get(&self, name: &str) -> f64 {
        self.terms.get(name).copied().unwrap_or(0.0)
    }

    pub fn merge(&mut self, other: LossReport) {
        self.terms.extend(other.terms);
        if other.total_g != 0.0 {
            self.total_g = other.total_g;
        }
        if other.total_d != 0.0 {
            self.total_d = other.total_d;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.total_g.is_finite() && self.total_d.is_finite() && self.terms.values().all(|v| v.is_finite())
    }
}

fn mean_abs_diff(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return invalid(format!("shape mismatch: {:?} vs {:?}", a.dims(), b.dims()));
    }
    Ok((a - b)?.abs()?.mean_all()?)
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = x.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

/// Generator LSGAN term, mean of `(score − 1)²`.
pub fn adv_g(score_fake: &Tensor) -> Result<Tensor> {
    Ok((score_fake - 1.0)?.sqr()?.mean_all()?)
}

/// Critic LSGAN term, mean of `fake²` plus mean of `(real − 1)²`.
pub fn adv_d(score_fake: &Tensor, score_real: &Tensor) -> Result<Tensor> {
    let fake = score_fake.sqr()?.mean_all()?;
    let real = (score_real - 1.0)?.sqr()?.mean_all()?;
    Ok((fake + real)?)
}

/// Binary cross-entropy on pre-sigmoid logits toward 1 (`is_real`) or 0.
///
/// Used for the mel critic during warm-up; the generator calls it with
/// `is_real = true` on fake scores (non-saturating form).
pub fn adv_ce(logits: &Tensor, is_real: bool) -> Result<Tensor> {
    let z = if is_real { logits.neg()? } else { logits.clone() };
    Ok(softplus(&z)?.mean_all()?)
}

fn cross_entropy(logits: &Tensor, labels: &[SpeakerId]) -> Result<Tensor> {
    let (b, s) = logits.dims2()?;
    if labels.len() != b {
        return invalid(format!("{} labels for batch of {b}", labels.len()));
    }
    let target = label_tensor(labels, s, logits.device())?;
    Ok(candle_nn::loss::cross_entropy(logits, &target)?)
}

/// Source-classifier loss: cross-entropy against the source speaker.
pub fn cls_loss(logits: &Tensor, y_src: &[SpeakerId]) -> Result<Tensor> {
    cross_entropy(logits, y_src)
}

/// Adversarial source-classifier loss: cross-entropy against the target speaker.
pub fn advcls_loss(logits: &Tensor, y_trg: &[SpeakerId]) -> Result<Tensor> {
    cross_entropy(logits, y_trg)
}

/// Style reconstruction, mean `|s − ŝ|`.
pub fn sty_loss(s: &Tensor, s_hat: &Tensor) -> Result<Tensor> {
    mean_abs_diff(s, s_hat)
}

/// Divides each `(B, T)` pitch track by its mean over voiced (`> 0`) frames.
/// All-zero tracks stay zero.
pub fn normalize_f0(f0: &Tensor) -> Result<Tensor> {
    let voiced = f0.gt(0.0)?.to_dtype(f0.dtype())?;
    let count = voiced.sum_keepdim(D::Minus1)?;
    let total = f0.sum_keepdim(D::Minus1)?;
    let count = count.maximum(1.0)?;
    let mean = (total / count)?;
    // Unvoiced tracks: divide by 1 (the numerator is already 0).
    let safe = mean.gt(0.0)?.where_cond(&mean, &mean.ones_like()?)?;
    Ok(f0.broadcast_div(&safe)?)
}

/// Plain-slice form of [`normalize_f0`] for a single track.
pub fn normalize_f0_track(f0: &[f32]) -> Vec<f32> {
    let voiced: Vec<f64> = f0.iter().filter(|&&v| v > 0.0).map(|&v| v as f64).collect();
    if voiced.is_empty() {
        log::warn!("pitch track has no voiced frames; normalized track is all zero");
        return vec![0.0; f0.len()];
    }
    let mean = voiced.iter().sum::<f64>() / voiced.len() as f64;
    f0.iter().map(|&v| (v as f64 / mean) as f32).collect()
}

/// F0 consistency: mean `|F̂(src) − F̂(gen)|`, cropping to the shorter track.
pub fn f0_loss(f0_src: &Tensor, f0_gen: &Tensor) -> Result<Tensor> {
    let t = f0_src.dim(D::Minus1)?.min(f0_gen.dim(D::Minus1)?);
    let a = normalize_f0(&f0_src.narrow(D::Minus1, 0, t)?)?;
    let b = normalize_f0(&f0_gen.narrow(D::Minus1, 0, t)?)?;
    mean_abs_diff(&a, &b)
}

/// Speech consistency on precomputed stacks; the real branch is a constant.
pub fn slm_consistency_from_stacks(real: &SlmFeatureStack, generated: &SlmFeatureStack) -> Result<Tensor> {
    let r = real.consistency_features()?.detach();
    let g = generated.consistency_features()?;
    mean_abs_diff(&r, &g)
}

/// Speech consistency between `(B, L)` real and generated waveforms.
pub fn slm_consistency_loss(
    backbone: &SlmBackbone,
    wav_real: &Tensor,
    wav_gen: &Tensor,
    rate_hz: u32,
) -> Result<Tensor> {
    let real = backbone.forward(&wav_real.detach(), rate_hz)?;
    let generated = backbone.forward(wav_gen, rate_hz)?;
    slm_consistency_from_stacks(&real, &generated)
}

/// Per-frame L1 norms of a `(B, N, T)` mel batch → `(B, T)`.
pub fn frame_norms(mel: &Tensor) -> Result<Tensor> {
    Ok(mel.abs()?.sum(1)?)
}

/// Norm consistency: mean over frames of `| ‖x_t‖ − ‖g_t‖ |`.
pub fn norm_loss(x: &Tensor, g: &Tensor) -> Result<Tensor> {
    if x.dim(D::Minus1)? != g.dim(D::Minus1)? {
        return invalid(format!(
            "frame count mismatch: {} vs {}",
            x.dim(D::Minus1)?,
            g.dim(D::Minus1)?
        ));
    }
    mean_abs_diff(&frame_norms(x)?, &frame_norms(g)?)
}

/// Cycle consistency, mean `|x − x_cyc|`.
pub fn cyc_loss(x: &Tensor, x_cyc: &Tensor) -> Result<Tensor> {
    mean_abs_diff(x, x_cyc)
}

/// Balanced consistency regularization: squared change of critic output under
/// `augment`, summed over the real and fake branches, each batch-meaned.
/// Inputs are generic so conditional critics can carry their labels along.
pub fn bcr_penalty<I, C, A>(critic: C, real: &I, fake: &I, mut augment: A) -> Result<Tensor>
where
    C: Fn(&I) -> Result<Tensor>,
    A: FnMut(&I) -> Result<I>,
{
    let real_term = (critic(real)? - critic(&augment(real)?)?)?.sqr()?.mean_all()?;
    let fake_term = (critic(fake)? - critic(&augment(fake)?)?)?.sqr()?.mean_all()?;
    Ok((real_term + fake_term)?)
}

const GENERATOR_TERMS: [&str; 7] = ["adv", "advcls", "sty", "f0", "slm", "norm", "cyc"];

/// `adv + λ_advcls·advcls + λ_sty·sty + λ_f0·f0 + λ_slm·slm + λ_norm·norm + λ_cyc·cyc`.
pub fn full_generator_objective(terms: &BTreeMap<String, f64>, w: &LossWeights) -> Result<f64> {
    for name in GENERATOR_TERMS {
        if !terms.contains_key(name) {
            return invalid(format!("missing generator term `{name}`"));
        }
    }
    Ok(w.generator_coefficients()
        .iter()
        .map(|(name, lambda)| lambda * terms[*name])
        .sum())
}

/// `adv_d + λ_cls·cls`.
pub fn full_discriminator_objective(adv_d_term: f64, cls_term: f64, w: &LossWeights) -> f64 {
    adv_d_term + w.cls * cls_term
}

/// Scalar tensor value as f64.
pub fn value(t: &Tensor) -> Result<f64> {
    crate::util::scalar(t)
}
