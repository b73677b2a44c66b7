//! One critic update and one generator update per batch.

use std::collections::BTreeMap;

use candle::backprop::GradStore;
use candle::Tensor;
use candle_nn::VarMap;
use rand::Rng;

use super::models::Models;
use super::optim::AdamW;
use super::TrainSchedule;
use crate::critics::label_tensor;
use crate::dataset::TrainingBatch;
use crate::error::{Error, Result};
use crate::losses::{self, LossReport, LossWeights};
use crate::slm::SlmFeatureStack;
use crate::util::{scalar, sorted_vars};

/// Optimizers for the two sides of the game.
pub struct Optimizers {
    pub generator: AdamW,
    pub critics: AdamW,
}

impl Optimizers {
    pub fn new(models: &Models, cfg: &super::OptimConfig) -> Result<Self> {
        Ok(Self {
            generator: AdamW::new(sorted_vars(&models.gen_vars), cfg.clone())?,
            critics: AdamW::new(sorted_vars(&models.disc_vars), cfg.clone())?,
        })
    }
}

/// Per-sample log-amplitude scaling by `a ∈ range` and a circular shift of
/// up to `max_shift` frames.
pub fn augment_mel(mel: &Tensor, range: (f64, f64), max_shift: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let (b, _, t) = mel.dims3()?;
    let max_shift = max_shift.min(t.saturating_sub(1)) as i32;
    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        let a = if range.0 < range.1 {
            rng.random_range(range.0..=range.1)
        } else {
            range.0
        };
        let shift = if max_shift > 0 {
            rng.random_range(-max_shift..=max_shift)
        } else {
            0
        };
        let x = (mel.narrow(0, i, 1)? + a.ln())?;
        out.push(if shift != 0 { x.roll(shift, 2)? } else { x });
    }
    Ok(Tensor::cat(&out, 0)?)
}

fn stack_of(models: &Models, mel: &Tensor) -> Result<SlmFeatureStack> {
    let wav = models.vocoder.forward(mel)?;
    models.backbone.forward(&wav, models.audio.sample_rate_hz)
}

/// Scores of the combined critic: `(mel score, SLM score if active)`.
fn critic_scores(
    models: &Models,
    mel: &Tensor,
    labels: &Tensor,
    with_slm: bool,
) -> Result<(Tensor, Option<Tensor>)> {
    let mel_score = models.mel_d.score(mel, labels)?;
    let slm_score = if with_slm {
        Some(models.slm_d.score(&stack_of(models, mel)?)?)
    } else {
        None
    };
    Ok((mel_score, slm_score))
}

fn combined(scores: &(Tensor, Option<Tensor>)) -> Result<Tensor> {
    Ok(match &scores.1 {
        Some(s) => (&scores.0 + s)?,
        None => scores.0.clone(),
    })
}

/// L2 norm of the gradients of variables whose names start with `prefix`.
pub fn gradient_norm(vars: &VarMap, grads: &GradStore, prefix: &str) -> Result<f64> {
    let mut total = 0.0;
    for (name, var) in sorted_vars(vars) {
        if !name.starts_with(prefix) {
            continue;
        }
        if let Some(g) = grads.get(&var) {
            total += scalar(&g.sqr()?.sum_all()?)?;
        }
    }
    Ok(total.sqrt())
}

fn non_finite(epoch: usize, step: usize, report: &LossReport) -> Error {
    Error::NonFinite {
        epoch,
        step,
        report: serde_json::to_string(report).unwrap_or_default(),
    }
}

/// Critic update.
///
/// Warm-up epochs train the mel critic alone with the cross-entropy form.
/// Once the SLM critic joins, the adversarial score is the sum of the mel and
/// SLM scores under the least-squares form, with bCR on the same combined
/// critic. The classifier term joins at its own start epoch.
#[allow(clippy::too_many_arguments)]
pub fn discriminator_step(
    models: &Models,
    opt: &mut AdamW,
    batch: &TrainingBatch,
    w: &LossWeights,
    schedule: &TrainSchedule,
    epoch: usize,
    step: usize,
    rng: &mut impl Rng,
) -> Result<LossReport> {
    let dev = &models.device;
    let n = models.n_speakers;
    let y_src = label_tensor(&batch.y_src, n, dev)?;
    let y_trg = label_tensor(&batch.y_trg, n, dev)?;
    let with_slm = schedule.slm_active(epoch);

    let s_trg = models.style.forward(&batch.x_ref)?.detach();
    let h_f0 = models.f0.features(&batch.x_src)?.detach();
    let fake = models.generator.forward(&batch.x_src, &s_trg, &h_f0)?.detach();
    let real = batch.x_src.detach();

    let real_scores = critic_scores(models, &real, &y_src, with_slm)?;
    let fake_scores = critic_scores(models, &fake, &y_trg, with_slm)?;
    let adv = if schedule.mel_uses_ce(epoch) {
        let mel = (losses::adv_ce(&real_scores.0, true)? + losses::adv_ce(&fake_scores.0, false)?)?;
        match (&fake_scores.1, &real_scores.1) {
            (Some(f), Some(r)) => (mel + losses::adv_d(f, r)?)?,
            _ => mel,
        }
    } else {
        losses::adv_d(&combined(&fake_scores)?, &combined(&real_scores)?)?
    };

    let zero = || adv.zeros_like();
    let bcr = if schedule.bcr_active(epoch) {
        let critic = |input: &(Tensor, Tensor)| -> Result<Tensor> {
            combined(&critic_scores(models, &input.0, &input.1, with_slm)?)
        };
        let (range, shift) = (schedule.bcr_scale_range, schedule.bcr_max_shift_frames);
        let augment = |input: &(Tensor, Tensor)| -> Result<(Tensor, Tensor)> {
            Ok((augment_mel(&input.0, range, shift, rng)?, input.1.clone()))
        };
        losses::bcr_penalty(critic, &(real.clone(), y_src.clone()), &(fake.clone(), y_trg.clone()), augment)?
    } else {
        zero()?
    };

    let cls = if schedule.cls_active(epoch) {
        let logits = models.classifier.logits(&stack_of(models, &fake)?)?;
        losses::cls_loss(&logits, &batch.y_src)?
    } else {
        zero()?
    };

    let total = ((&adv + (&cls * w.cls)?)? + (&bcr * schedule.bcr_weight)?)?;
    let mut report = LossReport::default();
    let adv_v = scalar(&adv)?;
    let cls_v = scalar(&cls)?;
    let bcr_v = scalar(&bcr)?;
    report.terms.insert("d_adv".into(), adv_v);
    report.terms.insert("cls".into(), cls_v);
    report.terms.insert("bcr".into(), bcr_v);
    report.terms.insert("d_mel_real".into(), scalar(&real_scores.0.mean_all()?)?);
    report.terms.insert("d_mel_fake".into(), scalar(&fake_scores.0.mean_all()?)?);
    let slm_mean = |s: &Option<Tensor>| -> Result<f64> {
        s.as_ref().map_or(Ok(0.0), |t| scalar(&t.mean_all()?))
    };
    report.terms.insert("d_slm_real".into(), slm_mean(&real_scores.1)?);
    report.terms.insert("d_slm_fake".into(), slm_mean(&fake_scores.1)?);
    report.total_d = losses::full_discriminator_objective(adv_v, cls_v, w) + schedule.bcr_weight * bcr_v;
    if !report.all_finite() || !scalar(&total)?.is_finite() {
        return Err(non_finite(epoch, step, &report));
    }

    let grads = total.backward()?;
    report.terms.insert("grad_mel_d".into(), gradient_norm(&models.disc_vars, &grads, "mel_d.")?);
    report.terms.insert("grad_slm_d".into(), gradient_norm(&models.disc_vars, &grads, "slm_d.")?);
    report.terms.insert("grad_cls".into(), gradient_norm(&models.disc_vars, &grads, "cls.")?);
    opt.step(&grads)?;
    Ok(report)
}

/// The seven generator loss terms of one batch, still attached to the graph,
/// plus the critic scores of the converted batch.
pub struct GeneratorTerms {
    /// `adv, advcls, sty, f0, slm, norm, cyc`, in that order.
    pub terms: Vec<(&'static str, Tensor)>,
    pub mel_score: Tensor,
    pub slm_score: Option<Tensor>,
}

impl GeneratorTerms {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.terms.iter().find(|(n, _)| *n == name).map(|(_, t)| t)
    }
}

/// Builds every generator loss term for `batch` at `epoch`. Terms whose stage
/// has not started are zero tensors.
pub fn generator_terms(models: &Models, batch: &TrainingBatch, schedule: &TrainSchedule, epoch: usize) -> Result<GeneratorTerms> {
    let dev = &models.device;
    let n = models.n_speakers;
    let rate = models.audio.sample_rate_hz;
    let y_trg = label_tensor(&batch.y_trg, n, dev)?;
    let with_slm = schedule.slm_active(epoch);
    let x = &batch.x_src;

    let s_trg = models.style.forward(&batch.x_ref)?;
    let (h_f0, f0_src) = models.f0.forward(x)?;
    let (h_f0, f0_src) = (h_f0.detach(), f0_src.detach());
    let fake = models.generator.forward(x, &s_trg, &h_f0)?;

    let wav_fake = models.vocoder.forward(&fake)?;
    let stack_fake = models.backbone.forward(&wav_fake, rate)?;
    let stack_real = models.backbone.forward(&models.vocoder.forward(x)?.detach(), rate)?.detach();

    let mel_score = models.mel_d.score(&fake, &y_trg)?;
    let slm_score = if with_slm {
        Some(models.slm_d.score(&stack_fake)?)
    } else {
        None
    };
    let adv = if schedule.mel_uses_ce(epoch) {
        let mel = losses::adv_ce(&mel_score, true)?;
        match &slm_score {
            Some(s) => (mel + losses::adv_g(s)?)?,
            None => mel,
        }
    } else {
        losses::adv_g(&combined(&(mel_score.clone(), slm_score.clone()))?)?
    };

    let sty = losses::sty_loss(&s_trg, &models.style.forward(&fake)?)?;
    let f0 = losses::f0_loss(&f0_src, &models.f0.pitch(&fake)?)?;
    let slm = losses::slm_consistency_from_stacks(&stack_real, &stack_fake)?;
    let norm = losses::norm_loss(x, &fake)?;
    let s_src = models.style.forward(x)?;
    let x_cyc = models.generator.forward(&fake, &s_src, &models.f0.features(&fake)?)?;
    let cyc = losses::cyc_loss(x, &x_cyc)?;
    let advcls = if schedule.cls_active(epoch) {
        losses::advcls_loss(&models.classifier.logits(&stack_fake)?, &batch.y_trg)?
    } else {
        adv.zeros_like()?
    };

    Ok(GeneratorTerms {
        terms: vec![
            ("adv", adv),
            ("advcls", advcls),
            ("sty", sty),
            ("f0", f0),
            ("slm", slm),
            ("norm", norm),
            ("cyc", cyc),
        ],
        mel_score,
        slm_score,
    })
}

/// Generator and style-encoder update on the full generator objective.
#[allow(clippy::too_many_arguments)]
pub fn generator_step(
    models: &Models,
    opt: &mut AdamW,
    batch: &TrainingBatch,
    w: &LossWeights,
    schedule: &TrainSchedule,
    epoch: usize,
    step: usize,
) -> Result<LossReport> {
    let g = generator_terms(models, batch, schedule, epoch)?;
    let coeffs: BTreeMap<&str, f64> = w.generator_coefficients().into_iter().collect();
    let mut total = g.mel_score.zeros_like()?.sum_all()?;
    let mut report = LossReport::default();
    for (name, t) in &g.terms {
        total = (total + (t * coeffs[name])?)?;
        report.terms.insert(name.to_string(), scalar(t)?);
    }
    report.terms.insert("g_mel_score".into(), scalar(&g.mel_score.mean_all()?)?);
    report.terms.insert(
        "g_slm_score".into(),
        g.slm_score.as_ref().map_or(Ok(0.0), |s| scalar(&s.mean_all()?))?,
    );
    report.total_g = losses::full_generator_objective(&report.terms, w)?;
    if !report.all_finite() || !scalar(&total)?.is_finite() {
        return Err(non_finite(epoch, step, &report));
    }

    let grads = total.backward()?;
    report.terms.insert("grad_generator".into(), gradient_norm(&models.gen_vars, &grads, "generator.")?);
    report.terms.insert("grad_style".into(), gradient_norm(&models.gen_vars, &grads, "style.")?);
    opt.step(&grads)?;
    Ok(report)
}
