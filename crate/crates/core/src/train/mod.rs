//! Staged adversarial training: schedule, optimizer, per-batch critic and
//! generator updates, the epoch loop, logging and checkpoints.

mod models;
mod optim;
pub(crate) mod run;
mod step;

pub use models::{FrozenHashes, Models, CRITICS_FILE, GENERATOR_FILE};
pub use optim::{AdamW, OptimConfig};
pub use run::{
    run_from_manifest,
    latest_checkpoint, read_log, run_training, CheckpointState, LogRecord, RunConfig, RunOptions, RunSummary,
    CHECKPOINT_FORMAT_VERSION,
};
pub use step::{
    augment_mel, discriminator_step, generator_step, generator_terms, gradient_norm, GeneratorTerms, Optimizers,
};

use serde::{Deserialize, Serialize};

use crate::error::{config, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub total_epochs: usize,
    /// First (0-based) epoch in which the SLM critic is trained and scored.
    pub slm_d_start_epoch: usize,
    pub bcr_start_epoch: usize,
    /// First epoch with the source classifier and adversarial classifier terms.
    pub cls_start_epoch: usize,
    pub batch_size: usize,
    pub segment_seconds: f64,
    /// Batches per epoch; defaults to `max(1, training utterances / batch_size)`.
    pub steps_per_epoch: Option<usize>,
    pub checkpoint_every: usize,
    /// Checkpoints kept on disk (0 keeps all).
    pub keep_checkpoints: usize,
    /// Keep the cross-entropy mel adversarial form after warm-up instead of
    /// switching to the least-squares form.
    pub mel_ce_after_warmup: bool,
    pub bcr_weight: f64,
    pub bcr_max_shift_frames: usize,
    pub bcr_scale_range: (f64, f64),
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            total_epochs: 90,
            slm_d_start_epoch: 20,
            bcr_start_epoch: 20,
            cls_start_epoch: 35,
            batch_size: 28,
            segment_seconds: 2.0,
            steps_per_epoch: None,
            checkpoint_every: 5,
            keep_checkpoints: 0,
            mel_ce_after_warmup: false,
            bcr_weight: 1.0,
            bcr_max_shift_frames: 4,
            bcr_scale_range: (0.9, 1.1),
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let t = self.total_epochs;
        if t == 0 || self.batch_size == 0 || self.checkpoint_every == 0 {
            return config("total_epochs, batch_size and checkpoint_every must be positive");
        }
        // Epoch 0 always runs without the SLM critic and the classifier.
        if self.slm_d_start_epoch == 0 || self.bcr_start_epoch == 0 || self.cls_start_epoch == 0 {
            return config("slm_d_start_epoch, bcr_start_epoch and cls_start_epoch must be at least 1");
        }
        if !(self.segment_seconds > 0.0) {
            return config("segment_seconds must be positive");
        }
        let (lo, hi) = self.bcr_scale_range;
        if !(lo > 0.0 && lo <= hi) || !(self.bcr_weight >= 0.0) {
            return config("bCR scale range must satisfy 0 < lo <= hi and weight >= 0");
        }
        if self.steps_per_epoch == Some(0) {
            return config("steps_per_epoch must be positive");
        }
        Ok(())
    }

    /// Logs a warning for every stage that starts after the last epoch.
    pub fn warn_unreached_stages(&self) {
        let t = self.total_epochs;
        for (name, e) in [
            ("slm_d_start_epoch", self.slm_d_start_epoch),
            ("bcr_start_epoch", self.bcr_start_epoch),
            ("cls_start_epoch", self.cls_start_epoch),
        ] {
            if e >= t {
                log::warn!("{name} = {e} is never reached in a {t}-epoch run");
            }
        }
    }

    pub fn slm_active(&self, epoch: usize) -> bool {
        epoch >= self.slm_d_start_epoch
    }

    pub fn bcr_active(&self, epoch: usize) -> bool {
        epoch >= self.bcr_start_epoch && self.bcr_weight > 0.0
    }

    pub fn cls_active(&self, epoch: usize) -> bool {
        epoch >= self.cls_start_epoch
    }

    /// Whether the mel critic uses the cross-entropy adversarial form.
    pub fn mel_uses_ce(&self, epoch: usize) -> bool {
        !self.slm_active(epoch) || self.mel_ce_after_warmup
    }

    pub fn steps_for(&self, n_utterances: usize) -> usize {
        self.steps_per_epoch
            .unwrap_or_else(|| (n_utterances / self.batch_size).max(1))
    }
}
