//! Corpus ingestion (speaker split, train/val split) and training batches.

use std::path::{Path, PathBuf};

use candle::{Device, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, resample, AudioConfig, MelAnalyzer, SpeakerId, Waveform};
use crate::error::{config, invalid, Result};
use crate::util::stream_rng;

/// Share of each seen speaker's utterances held out for validation.
pub const VAL_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceEntry {
    pub path: PathBuf,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerEntry {
    pub name: String,
    pub seen: bool,
    pub utterances: Vec<UtteranceEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub seed: u64,
    pub unseen_fraction: f64,
    /// Sorted by name.
    pub speakers: Vec<SpeakerEntry>,
}

impl DatasetManifest {
    /// Seen speakers in roster order; the position is the [`SpeakerId`].
    pub fn roster(&self) -> Vec<&SpeakerEntry> {
        self.speakers.iter().filter(|s| s.seen).collect()
    }

    pub fn unseen(&self) -> Vec<&SpeakerEntry> {
        self.speakers.iter().filter(|s| !s.seen).collect()
    }

    pub fn train_paths(&self) -> Vec<&Path> {
        self.roster()
            .into_iter()
            .flat_map(|s| s.utterances.iter())
            .filter(|u| u.split == Split::Train)
            .map(|u| u.path.as_path())
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

fn is_wav(p: &Path) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav"))
}

/// Scans `root/<speaker>/*.wav`, picks `round(n·unseen_fraction)` unseen
/// speakers and splits each seen speaker's utterances 90/10 into train/val.
pub fn ingest(root: impl AsRef<Path>, seed: u64, unseen_fraction: f64) -> Result<DatasetManifest> {
    let root = root.as_ref();
    if !(0.0..1.0).contains(&unseen_fraction) {
        return config(format!("unseen fraction must be in [0, 1), got {unseen_fraction}"));
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();

    let mut speakers = Vec::new();
    for dir in dirs {
        let name = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_wav(p))
            .collect();
        files.sort();
        if files.is_empty() {
            log::warn!("speaker directory {} has no wav files; skipped", dir.display());
            continue;
        }
        for f in &files {
            read_wav(f)?;
        }
        speakers.push((name, files));
    }

    let n_unseen = (speakers.len() as f64 * unseen_fraction).round() as usize;
    if speakers.len().saturating_sub(n_unseen) < 2 {
        return config(format!(
            "need at least two seen speakers, found {} speakers with {n_unseen} held out",
            speakers.len()
        ));
    }
    let mut rng = stream_rng(seed, "ingest");
    let mut order: Vec<usize> = (0..speakers.len()).collect();
    order.shuffle(&mut rng);
    let unseen: Vec<usize> = order[..n_unseen].to_vec();

    let entries = speakers
        .into_iter()
        .enumerate()
        .map(|(i, (name, files))| {
            let seen = !unseen.contains(&i);
            let mut split = vec![Split::Train; files.len()];
            if seen {
                let n_val = (files.len() as f64 * VAL_FRACTION).round() as usize;
                let mut idx: Vec<usize> = (0..files.len()).collect();
                idx.shuffle(&mut rng);
                for &k in &idx[..n_val] {
                    split[k] = Split::Val;
                }
            }
            SpeakerEntry {
                name,
                seen,
                utterances: files
                    .into_iter()
                    .zip(split)
                    .map(|(path, split)| UtteranceEntry { path, split })
                    .collect(),
            }
        })
        .collect();
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        seed,
        unseen_fraction,
        speakers: entries,
    })
}

/// Reads a WAV file and brings it to the configured rate.
pub fn load_audio(path: impl AsRef<Path>, cfg: &AudioConfig) -> Result<Waveform> {
    let wav = read_wav(path)?;
    if wav.sample_rate_hz() == cfg.sample_rate_hz {
        Ok(wav)
    } else {
        resample(&wav, cfg.sample_rate_hz)
    }
}

#[derive(Debug, Clone)]
struct LoadedUtterance {
    path: PathBuf,
    wav: Waveform,
}

/// Training utterances of the seen speakers, in memory.
#[derive(Debug, Clone)]
pub struct TrainingData {
    speakers: Vec<Vec<LoadedUtterance>>,
    names: Vec<String>,
}

impl TrainingData {
    pub fn from_manifest(manifest: &DatasetManifest, cfg: &AudioConfig) -> Result<Self> {
        let mut speakers = Vec::new();
        let mut names = Vec::new();
        for spk in manifest.roster() {
            let utts = spk
                .utterances
                .iter()
                .filter(|u| u.split == Split::Train)
                .map(|u| {
                    Ok(LoadedUtterance {
                        path: u.path.clone(),
                        wav: load_audio(&u.path, cfg)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if utts.is_empty() {
                return config(format!("seen speaker {} has no training utterances", spk.name));
            }
            speakers.push(utts);
            names.push(spk.name.clone());
        }
        Self::check(speakers, names)
    }

    /// In-memory data, one list of waveforms per speaker.
    pub fn from_waveforms(per_speaker: Vec<(String, Vec<Waveform>)>) -> Result<Self> {
        let mut speakers = Vec::new();
        let mut names = Vec::new();
        for (name, wavs) in per_speaker {
            speakers.push(
                wavs.into_iter()
                    .enumerate()
                    .map(|(k, wav)| LoadedUtterance {
                        path: PathBuf::from(format!("{name}/mem_{k:03}")),
                        wav,
                    })
                    .collect::<Vec<_>>(),
            );
            names.push(name);
        }
        Self::check(speakers, names)
    }

    fn check(speakers: Vec<Vec<LoadedUtterance>>, names: Vec<String>) -> Result<Self> {
        if speakers.len() < 2 {
            return config(format!("need at least two training speakers, got {}", speakers.len()));
        }
        if speakers.iter().any(|s| s.is_empty()) {
            return config("every training speaker needs at least one utterance");
        }
        Ok(Self { speakers, names })
    }

    pub fn n_speakers(&self) -> usize {
        self.speakers.len()
    }

    pub fn speaker_names(&self) -> &[String] {
        &self.names
    }

    pub fn n_utterances(&self) -> usize {
        self.speakers.iter().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone)]
pub struct TrainingBatch {
    /// `(B, N, T)` source log-mels.
    pub x_src: Tensor,
    /// `(B, N, T)` reference log-mels, drawn from the target speakers.
    pub x_ref: Tensor,
    pub y_src: Vec<SpeakerId>,
    pub y_trg: Vec<SpeakerId>,
    pub src_paths: Vec<PathBuf>,
    pub ref_paths: Vec<PathBuf>,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.y_src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y_src.is_empty()
    }
}

fn segment(wav: &Waveform, n: usize, rng: &mut impl Rng) -> Result<Waveform> {
    let s = wav.samples();
    let out = if s.len() > n {
        let start = rng.random_range(0..=s.len() - n);
        s[start..start + n].to_vec()
    } else {
        let mut v = s.to_vec();
        v.resize(n, 0.0);
        v
    };
    Waveform::new(out, wav.sample_rate_hz())
}

/// Draws a batch: source utterances uniformly over all training utterances,
/// targets uniformly over the roster, references from the target speaker.
/// Segments are cropped or zero-padded to exactly `segment_samples`.
pub fn make_batch(
    data: &TrainingData,
    analyzer: &MelAnalyzer,
    batch_size: usize,
    segment_samples: usize,
    rng: &mut impl Rng,
    device: &Device,
) -> Result<TrainingBatch> {
    if batch_size == 0 || segment_samples == 0 {
        return invalid("batch size and segment length must be positive");
    }
    let roster = data.n_speakers();
    let total = data.n_utterances();
    let mut src = Vec::with_capacity(batch_size);
    let mut refs = Vec::with_capacity(batch_size);
    let mut batch = TrainingBatch {
        x_src: Tensor::zeros(1, candle::DType::F32, device)?,
        x_ref: Tensor::zeros(1, candle::DType::F32, device)?,
        y_src: Vec::with_capacity(batch_size),
        y_trg: Vec::with_capacity(batch_size),
        src_paths: Vec::with_capacity(batch_size),
        ref_paths: Vec::with_capacity(batch_size),
    };
    for _ in 0..batch_size {
        let mut k = rng.random_range(0..total);
        let mut spk = 0;
        while k >= data.speakers[spk].len() {
            k -= data.speakers[spk].len();
            spk += 1;
        }
        let u = &data.speakers[spk][k];
        src.push(analyzer.analyze(&segment(&u.wav, segment_samples, rng)?)?.to_tensor(device)?);
        batch.y_src.push(SpeakerId::new(spk, roster)?);
        batch.src_paths.push(u.path.clone());

        let trg = rng.random_range(0..roster);
        let r = &data.speakers[trg][rng.random_range(0..data.speakers[trg].len())];
        refs.push(analyzer.analyze(&segment(&r.wav, segment_samples, rng)?)?.to_tensor(device)?);
        batch.y_trg.push(SpeakerId::new(trg, roster)?);
        batch.ref_paths.push(r.path.clone());
    }
    batch.x_src = Tensor::cat(&src, 0)?;
    batch.x_ref = Tensor::cat(&refs, 0)?;
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{roster, write_corpus};

    fn corpus(n_speakers: usize, n_utts: usize) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), &roster(n_speakers), n_utts, 0.3, 22050, 1).unwrap();
        dir
    }

    #[test]
    fn unseen_split_arithmetic() {
        let dir = corpus(10, 2);
        let m = ingest(dir.path(), 3, 0.2).unwrap();
        assert_eq!(m.roster().len(), 8);
        assert_eq!(m.unseen().len(), 2);
        for s in m.unseen() {
            assert!(s.utterances.iter().all(|u| !m.train_paths().contains(&u.path.as_path())));
        }
    }

    #[test]
    fn ninety_ten_split() {
        let dir = corpus(2, 20);
        let m = ingest(dir.path(), 5, 0.0).unwrap();
        for s in m.roster() {
            let train = s.utterances.iter().filter(|u| u.split == Split::Train).count();
            assert_eq!((train, s.utterances.len() - train), (18, 2));
        }
    }

    #[test]
    fn ingest_is_deterministic() {
        let dir = corpus(6, 3);
        assert_eq!(ingest(dir.path(), 9, 0.3).unwrap(), ingest(dir.path(), 9, 0.3).unwrap());
    }

    #[test]
    fn empty_dirs_are_skipped_and_too_few_speakers_fail() {
        let dir = corpus(2, 1);
        std::fs::create_dir(dir.path().join("zz_empty")).unwrap();
        let m = ingest(dir.path(), 0, 0.0).unwrap();
        assert_eq!(m.speakers.len(), 2);
        assert!(matches!(ingest(dir.path(), 0, 0.5), Err(crate::Error::Config(_))));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = corpus(3, 2);
        let m = ingest(dir.path(), 2, 0.0).unwrap();
        let p = dir.path().join("manifest.json");
        m.save(&p).unwrap();
        assert_eq!(DatasetManifest::load(&p).unwrap(), m);
    }

    #[test]
    fn batches_are_seeded_and_sized() {
        let dir = corpus(3, 2);
        let m = ingest(dir.path(), 2, 0.0).unwrap();
        let cfg = AudioConfig::default();
        let data = TrainingData::from_manifest(&m, &cfg).unwrap();
        let an = MelAnalyzer::new(&cfg).unwrap();
        let seg = cfg.segment_samples(0.5);
        let dev = Device::Cpu;
        let a = make_batch(&data, &an, 5, seg, &mut stream_rng(7, "b"), &dev).unwrap();
        let b = make_batch(&data, &an, 5, seg, &mut stream_rng(7, "b"), &dev).unwrap();
        assert_eq!(a.src_paths, b.src_paths);
        assert_eq!(a.y_trg, b.y_trg);
        let diff = (&a.x_src - &b.x_src).unwrap().abs().unwrap().sum_all().unwrap();
        assert_eq!(diff.to_scalar::<f32>().unwrap(), 0.0);
        assert_eq!(a.x_src.dims(), &[5, 80, cfg.n_frames(seg)]);
        // references belong to their target speaker
        for (p, y) in a.ref_paths.iter().zip(&a.y_trg) {
            assert!(p.starts_with(dir.path().join(&data.speaker_names()[y.index()])));
        }
    }

    #[test]
    fn two_second_segment_length() {
        assert_eq!(AudioConfig::default().segment_samples(2.0), 44100);
    }
}
