mod common;

use std::collections::HashSet;
use std::path::PathBuf;

use candle::Device;
use common::*;
use slmgan::audio::MelAnalyzer;
use slmgan::commands::Converter;
use slmgan::dataset::{ingest, make_batch, TrainingBatch, TrainingData};
use slmgan::losses::LossWeights;
use slmgan::synth;
use slmgan::train::{
    discriminator_step, generator_terms, gradient_norm, read_log, run_training, Models, OptimConfig, Optimizers,
    RunConfig, RunOptions, TrainSchedule,
};
use slmgan::util::{hash_tensors, sorted_vars, stream_rng};

fn setup(n_speakers: usize) -> (RunConfig, Models, TrainingBatch) {
    let cfg = RunConfig::toy();
    let data = synthetic_data(n_speakers, 2, 0.6, 3);
    let models = Models::new(&cfg.audio, &cfg.network, n_speakers, 5, &Device::Cpu).unwrap();
    let analyzer = MelAnalyzer::new(&cfg.audio).unwrap();
    let seg = cfg.audio.segment_samples(cfg.schedule.segment_seconds);
    let batch = make_batch(&data, &analyzer, 2, seg, &mut stream_rng(9, "batch"), &Device::Cpu).unwrap();
    (cfg, models, batch)
}

fn prefix_hash(models: &Models, prefix: &str) -> String {
    let vars = sorted_vars(&models.disc_vars);
    let tensors: Vec<(&str, &candle::Tensor)> = vars
        .iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .map(|(n, v)| (n.as_str(), v.as_tensor()))
        .collect();
    assert!(!tensors.is_empty(), "no variables under {prefix}");
    hash_tensors(tensors).unwrap()
}

#[test]
fn every_generator_term_reaches_generator_and_style_encoder() {
    let (cfg, models, batch) = setup(3);
    let epoch = cfg.schedule.cls_start_epoch;
    let g = generator_terms(&models, &batch, &cfg.schedule, epoch).unwrap();
    for (name, t) in &g.terms {
        let grads = t.backward().unwrap();
        let gen = gradient_norm(&models.gen_vars, &grads, "generator.").unwrap();
        let sty = gradient_norm(&models.gen_vars, &grads, "style.").unwrap();
        assert!(gen > 0.0 && gen.is_finite(), "{name}: generator gradient {gen}");
        assert!(sty > 0.0 && sty.is_finite(), "{name}: style gradient {sty}");
    }
}

#[test]
fn inactive_terms_are_zero_before_their_stage() {
    let (cfg, models, batch) = setup(3);
    let g = generator_terms(&models, &batch, &cfg.schedule, 0).unwrap();
    assert_eq!(scalar(g.get("advcls").unwrap()), 0.0);
    assert!(g.slm_score.is_none());
}

#[test]
fn critics_change_only_once_their_stage_starts() {
    let (cfg, models, batch) = setup(3);
    let s: &TrainSchedule = &cfg.schedule;
    let mut opt = Optimizers::new(&models, &OptimConfig::default()).unwrap();
    let w = LossWeights::default();
    let snapshot = |m: &Models| ["mel_d.", "slm_d.", "cls."].map(|p| prefix_hash(m, p));

    let before = snapshot(&models);
    let r = discriminator_step(&models, &mut opt.critics, &batch, &w, s, 0, 0, &mut stream_rng(1, "d")).unwrap();
    let after = snapshot(&models);
    assert_ne!(before[0], after[0], "mel critic must train from the start");
    assert_eq!(before[1], after[1], "SLM critic touched before its start");
    assert_eq!(before[2], after[2], "classifier touched before its start");
    assert_eq!(r.terms["grad_slm_d"], 0.0);
    assert_eq!(r.terms["grad_cls"], 0.0);

    let e = s.slm_d_start_epoch;
    let r = discriminator_step(&models, &mut opt.critics, &batch, &w, s, e, 1, &mut stream_rng(1, "d")).unwrap();
    let mid = snapshot(&models);
    assert_ne!(after[1], mid[1]);
    assert_eq!(after[2], mid[2]);
    assert!(r.terms["grad_slm_d"] > 0.0);

    let e = s.cls_start_epoch;
    let r = discriminator_step(&models, &mut opt.critics, &batch, &w, s, e, 2, &mut stream_rng(1, "d")).unwrap();
    assert_ne!(mid[2], snapshot(&models)[2]);
    assert!(r.terms["grad_cls"] > 0.0);
}

#[test]
fn batches_never_draw_unseen_speakers() {
    let dir = tempfile::tempdir().unwrap();
    synth::write_corpus(dir.path(), &synth::roster(5), 3, 0.4, 22_050, 2).unwrap();
    let manifest = ingest(dir.path(), 11, 0.2).unwrap();
    let unseen: HashSet<PathBuf> = manifest
        .unseen()
        .iter()
        .flat_map(|s| s.utterances.iter().map(|u| u.path.clone()))
        .collect();
    assert!(!unseen.is_empty());
    let allowed: HashSet<PathBuf> = manifest.train_paths().into_iter().map(PathBuf::from).collect();
    let cfg = RunConfig::default();
    let data = TrainingData::from_manifest(&manifest, &cfg.audio).unwrap();
    let analyzer = MelAnalyzer::new(&cfg.audio).unwrap();
    let mut rng = stream_rng(4, "audit");
    for _ in 0..20 {
        let b = make_batch(&data, &analyzer, 4, 4000, &mut rng, &Device::Cpu).unwrap();
        for p in b.src_paths.iter().chain(&b.ref_paths) {
            assert!(!unseen.contains(p), "unseen utterance {} in a batch", p.display());
            assert!(allowed.contains(p));
        }
    }
}

fn tiny_config(epochs: usize) -> RunConfig {
    let mut cfg = RunConfig::toy();
    cfg.seed = 13;
    cfg.schedule.total_epochs = epochs;
    cfg.schedule.steps_per_epoch = Some(2);
    cfg.schedule.batch_size = 2;
    cfg.schedule.checkpoint_every = 1;
    cfg.schedule.slm_d_start_epoch = 1;
    cfg.schedule.bcr_start_epoch = 1;
    cfg.schedule.cls_start_epoch = 2;
    cfg
}

#[test]
fn interrupted_run_resumes_to_the_same_losses() {
    let cfg = tiny_config(3);
    let data = synthetic_data(3, 2, 0.6, 8);
    let dev = Device::Cpu;
    let full_dir = tempfile::tempdir().unwrap();
    let full = run_training(&cfg, &data, full_dir.path(), RunOptions::default(), &dev).unwrap();
    let full_log = read_log(&full.log).unwrap();
    assert_eq!(full_log.len(), 3 * 2);
    assert!(full.checkpoint.join("state.json").is_file());
    assert_eq!(full.frozen_before, full.frozen_after);

    let part_dir = tempfile::tempdir().unwrap();
    let stop = RunOptions {
        resume: false,
        stop_after_epoch: Some(1),
    };
    let part = run_training(&cfg, &data, part_dir.path(), stop, &dev).unwrap();
    assert_eq!(part.epochs_completed, 1);
    let resume = RunOptions {
        resume: true,
        stop_after_epoch: None,
    };
    let resumed = run_training(&cfg, &data, part_dir.path(), resume, &dev).unwrap();
    assert_eq!(resumed.epochs_completed, 3);
    assert_eq!(resumed.global_step, full.global_step);
    let resumed_log = read_log(&resumed.log).unwrap();
    assert_eq!(resumed_log.len(), full_log.len());
    for (a, b) in full_log.iter().zip(&resumed_log) {
        assert_eq!((a.epoch, a.step), (b.epoch, b.step));
        assert!((a.total_g - b.total_g).abs() < 1e-6, "epoch {}: {} vs {}", a.epoch, a.total_g, b.total_g);
        assert!((a.total_d - b.total_d).abs() < 1e-6);
    }

    // Inference from the finished run.
    let conv = Converter::load(&resumed.checkpoint, Some(&cfg), &dev).unwrap();
    let speakers = synth::roster(2);
    let src = synth::utterance(&speakers[0], 2.0, 22_050, 1);
    let reference = synth::utterance(&speakers[1], 1.0, 22_050, 2);
    let out = conv.convert(&src, &reference).unwrap();
    assert_eq!(out.len(), 44_032);
    assert_eq!(out.len(), conv.output_len(src.len()));
    assert_eq!(out.samples(), conv.convert(&src, &reference).unwrap().samples());

    let analyzer = MelAnalyzer::new(&cfg.audio).unwrap();
    let mel = analyzer.analyze(&src).unwrap();
    let same = conv.convert_mel(&mel, &mel).unwrap();
    let l1 = mean_abs_diff(
        &mel.values().iter().map(|&v| v as f64).collect::<Vec<_>>(),
        &same.values().iter().map(|&v| v as f64).collect::<Vec<_>>(),
    );
    println!("self-conversion mel L1 after 3 tiny epochs: {l1:.4}");
    assert!(l1.is_finite());
}
