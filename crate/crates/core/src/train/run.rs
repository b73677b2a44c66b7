//! Epoch loop, run configuration, loss log and checkpoint directory.
//!
//! Layout of an output directory:
//!
//! ```text
//! <out>/config.toml                 run configuration snapshot
//! <out>/losses.jsonl                one LogRecord per training step
//! <out>/frozen/{f0,slm_backbone}.safetensors
//! <out>/checkpoints/epoch_NNNN/     NNNN = epochs completed
//!     generator.safetensors  critics.safetensors
//!     optim_generator.safetensors  optim_critics.safetensors
//!     config.toml  state.json
//! ```

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use candle::Device;
use serde::{Deserialize, Serialize};

use super::models::{FrozenHashes, Models};
use super::optim::OptimConfig;
use super::step::{discriminator_step, generator_step, Optimizers};
use super::TrainSchedule;
use crate::audio::{AudioConfig, MelAnalyzer};
use crate::dataset::{make_batch, DatasetManifest, TrainingData};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::nets::NetworkConfig;
use crate::util::stream_rng;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const OPT_G_FILE: &str = "optim_generator.safetensors";
const OPT_D_FILE: &str = "optim_critics.safetensors";
pub(crate) const STATE_FILE: &str = "state.json";
pub(crate) const CONFIG_FILE: &str = "config.toml";
const LOG_FILE: &str = "losses.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    /// Dataset manifest written by ingestion.
    pub manifest: Option<PathBuf>,
    pub audio: AudioConfig,
    pub network: NetworkConfig,
    pub weights: LossWeights,
    pub schedule: TrainSchedule,
    pub optim: OptimConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            manifest: None,
            audio: AudioConfig::default(),
            network: NetworkConfig::default(),
            weights: LossWeights::default(),
            schedule: TrainSchedule::default(),
            optim: OptimConfig::default(),
        }
    }
}

impl RunConfig {
    /// Small preset that trains on a single CPU core in seconds per epoch:
    /// narrow networks, 0.5-s segments, batches of 4 and one step per epoch.
    pub fn toy() -> Self {
        Self {
            network: NetworkConfig {
                base_channels: 16,
                max_channels: 64,
                critic_channels: 16,
                f0_channels: 16,
                ..Default::default()
            },
            schedule: TrainSchedule {
                total_epochs: 40,
                batch_size: 4,
                segment_seconds: 0.5,
                steps_per_epoch: Some(1),
                ..Default::default()
            },
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.audio.validate()?;
        self.network.validate(self.audio.n_mel_bands)?;
        self.weights.validate()?;
        self.schedule.validate()?;
        self.optim.validate()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: Self = toml::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, toml::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Continue from the newest checkpoint in the output directory, if any.
    pub resume: bool,
    /// Stop (with a checkpoint) once this many epochs are complete.
    pub stop_after_epoch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointState {
    pub format_version: u32,
    pub epochs_completed: usize,
    pub global_step: usize,
    pub seed: u64,
    pub roster: Vec<String>,
    pub frozen: FrozenHashes,
    pub generator_hash: String,
    pub critics_hash: String,
}

impl CheckpointState {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(STATE_FILE);
        let state: Self = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
        if state.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint {
                path,
                msg: format!("unsupported format version {}", state.format_version),
            });
        }
        Ok(state)
    }
}

/// One line of the loss log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub step: usize,
    pub global_step: usize,
    pub terms: BTreeMap<String, f64>,
    pub total_g: f64,
    pub total_d: f64,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub epochs_completed: usize,
    pub global_step: usize,
    pub frozen_before: FrozenHashes,
    pub frozen_after: FrozenHashes,
}

pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<LogRecord>> {
    let f = std::fs::File::open(path)?;
    BufReader::new(f)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}

fn checkpoint_dirs(out: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let root = out.join("checkpoints");
    if !root.is_dir() {
        return Ok(Vec::new());
    }
    let mut found = Vec::new();
    for entry in std::fs::read_dir(&root)? {
        let p = entry?.path();
        let epoch = p
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("epoch_"))
            .and_then(|n| n.parse::<usize>().ok());
        if let Some(e) = epoch {
            if p.join(STATE_FILE).is_file() {
                found.push((e, p));
            }
        }
    }
    found.sort();
    Ok(found)
}

/// Newest complete checkpoint under `<out>/checkpoints`.
pub fn latest_checkpoint(out: impl AsRef<Path>) -> Result<Option<PathBuf>> {
    Ok(checkpoint_dirs(out.as_ref())?.pop().map(|(_, p)| p))
}

pub(crate) fn mismatch(path: &Path, what: &str) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        msg: format!("{what} differs from the run configuration"),
    }
}

#[allow(clippy::too_many_arguments)]
fn save_checkpoint(
    out: &Path,
    cfg: &RunConfig,
    models: &Models,
    opts: &Optimizers,
    roster: &[String],
    epochs_completed: usize,
    global_step: usize,
) -> Result<PathBuf> {
    let dir = out.join("checkpoints").join(format!("epoch_{epochs_completed:04}"));
    let tmp = out.join("checkpoints").join(format!(".tmp_epoch_{epochs_completed:04}"));
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp)?;
    }
    models.save_weights(&tmp)?;
    opts.generator.save(tmp.join(OPT_G_FILE))?;
    opts.critics.save(tmp.join(OPT_D_FILE))?;
    cfg.save(tmp.join(CONFIG_FILE))?;
    let state = CheckpointState {
        format_version: CHECKPOINT_FORMAT_VERSION,
        epochs_completed,
        global_step,
        seed: cfg.seed,
        roster: roster.to_vec(),
        frozen: models.frozen_hashes()?,
        generator_hash: models.generator_hash()?,
        critics_hash: models.critics_hash()?,
    };
    std::fs::write(tmp.join(STATE_FILE), serde_json::to_string_pretty(&state)?)?;
    if dir.exists() {
        std::fs::remove_dir_all(&dir)?;
    }
    std::fs::rename(&tmp, &dir)?;

    let keep = cfg.schedule.keep_checkpoints;
    if keep > 0 {
        let all = checkpoint_dirs(out)?;
        for (_, old) in all.iter().take(all.len().saturating_sub(keep)) {
            std::fs::remove_dir_all(old)?;
        }
    }
    Ok(dir)
}

/// Loads models and optimizers from a checkpoint, refusing any configuration
/// or frozen-module mismatch.
pub(crate) fn load_checkpoint(
    dir: &Path,
    cfg: &RunConfig,
    roster: &[String],
    device: &Device,
) -> Result<(Models, Optimizers, CheckpointState)> {
    let state = CheckpointState::load(dir)?;
    let saved: RunConfig = toml::from_str(&std::fs::read_to_string(dir.join(CONFIG_FILE))?)?;
    if saved.audio != cfg.audio {
        return Err(mismatch(dir, "audio configuration"));
    }
    if saved.network != cfg.network {
        return Err(mismatch(dir, "network configuration"));
    }
    if state.roster != roster {
        return Err(mismatch(dir, "speaker roster"));
    }
    let models = Models::load_weights(dir, &cfg.audio, &cfg.network, roster.len(), device)?;
    if models.frozen_hashes()? != state.frozen {
        return Err(mismatch(dir, "frozen module fingerprint"));
    }
    let mut opts = Optimizers::new(&models, &cfg.optim)?;
    opts.generator.load(dir.join(OPT_G_FILE), device)?;
    opts.critics.load(dir.join(OPT_D_FILE), device)?;
    Ok((models, opts, state))
}

fn truncate_log(path: &Path, before_epoch: usize) -> Result<()> {
    let kept: Vec<LogRecord> = if path.is_file() {
        read_log(path)?.into_iter().filter(|r| r.epoch < before_epoch).collect()
    } else {
        Vec::new()
    };
    let mut f = std::fs::File::create(path)?;
    for r in kept {
        writeln!(f, "{}", serde_json::to_string(&r)?)?;
    }
    Ok(())
}

/// Loads the manifest named in `cfg` and trains.
pub fn run_from_manifest(cfg: &RunConfig, out: impl AsRef<Path>, opts: RunOptions, device: &Device) -> Result<RunSummary> {
    let path = cfg
        .manifest
        .as_ref()
        .ok_or_else(|| Error::Config("run configuration names no dataset manifest".into()))?;
    let manifest = DatasetManifest::load(path)?;
    let data = TrainingData::from_manifest(&manifest, &cfg.audio)?;
    run_training(cfg, &data, out, opts, device)
}

/// Runs (or resumes) the staged training loop. Each step is one critic update
/// followed by one generator update on the same batch; batches and bCR
/// augmentations come from an RNG reseeded from `(seed, epoch)`.
pub fn run_training(
    cfg: &RunConfig,
    data: &TrainingData,
    out: impl AsRef<Path>,
    opts: RunOptions,
    device: &Device,
) -> Result<RunSummary> {
    cfg.validate()?;
    cfg.schedule.warn_unreached_stages();
    let out = out.as_ref();
    std::fs::create_dir_all(out.join("checkpoints"))?;
    let log_path = out.join(LOG_FILE);
    let roster = data.speaker_names().to_vec();
    let sched = &cfg.schedule;

    let resume_from = if opts.resume { latest_checkpoint(out)? } else { None };
    let (models, mut optims, mut epoch, mut global_step) = match resume_from {
        Some(dir) => {
            let (m, o, state) = load_checkpoint(&dir, cfg, &roster, device)?;
            log::info!("resuming from {} ({} epochs done)", dir.display(), state.epochs_completed);
            truncate_log(&log_path, state.epochs_completed)?;
            (m, o, state.epochs_completed, state.global_step)
        }
        None => {
            let m = Models::new(&cfg.audio, &cfg.network, roster.len(), cfg.seed, device)?;
            let o = Optimizers::new(&m, &cfg.optim)?;
            std::fs::File::create(&log_path)?;
            cfg.save(out.join(CONFIG_FILE))?;
            let frozen = out.join("frozen");
            std::fs::create_dir_all(&frozen)?;
            m.f0.save(frozen.join("f0.safetensors"))?;
            m.backbone.save(frozen.join("slm_backbone.safetensors"))?;
            (m, o, 0, 0)
        }
    };
    let frozen_before = models.frozen_hashes()?;

    let analyzer = MelAnalyzer::new(&cfg.audio)?;
    let seg = cfg.audio.segment_samples(sched.segment_seconds);
    let steps = sched.steps_for(data.n_utterances());
    let end = opts
        .stop_after_epoch
        .map_or(sched.total_epochs, |s| s.min(sched.total_epochs));
    let mut log = std::fs::OpenOptions::new().append(true).open(&log_path)?;
    let mut last_checkpoint = latest_checkpoint(out)?;

    while epoch < end {
        let mut rng = stream_rng(cfg.seed, &format!("epoch-{epoch}"));
        let mut sum_g = 0.0;
        for step in 0..steps {
            let batch = make_batch(data, &analyzer, sched.batch_size, seg, &mut rng, device)?;
            let d = discriminator_step(&models, &mut optims.critics, &batch, &cfg.weights, sched, epoch, step, &mut rng)?;
            let g = generator_step(&models, &mut optims.generator, &batch, &cfg.weights, sched, epoch, step)?;
            let mut terms = d.terms;
            terms.extend(g.terms);
            let rec = LogRecord {
                epoch,
                step,
                global_step,
                terms,
                total_g: g.total_g,
                total_d: d.total_d,
            };
            writeln!(log, "{}", serde_json::to_string(&rec)?)?;
            sum_g += rec.total_g;
            global_step += 1;
        }
        log.flush()?;
        log::info!("epoch {epoch}: mean generator objective {:.4}", sum_g / steps as f64);
        epoch += 1;
        if epoch % sched.checkpoint_every == 0 || epoch == end {
            last_checkpoint = Some(save_checkpoint(out, cfg, &models, &optims, &roster, epoch, global_step)?);
        }
    }

    let frozen_after = models.frozen_hashes()?;
    if frozen_after != frozen_before {
        return Err(Error::Checkpoint {
            path: out.to_path_buf(),
            msg: "a frozen module changed during training".into(),
        });
    }
    let checkpoint = match last_checkpoint {
        Some(c) => c,
        None => save_checkpoint(out, cfg, &models, &optims, &roster, epoch, global_step)?,
    };
    Ok(RunSummary {
        checkpoint,
        log: log_path,
        epochs_completed: epoch,
        global_step,
        frozen_before,
        frozen_after,
    })
}
