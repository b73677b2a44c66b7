use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use candle::Device;
use clap::{Parser, Subcommand, ValueEnum};
use slmgan::commands::{self, REFERENCE_GPU_RTF};
use slmgan::dataset::{ingest, DatasetManifest};
use slmgan::slm::ImportanceNorm;
use slmgan::synth;
use slmgan::train::{run_from_manifest, RunConfig, RunOptions};

/// Environment variable naming the default dataset root for `ingest`.
const DATA_ROOT_ENV: &str = "SLMGAN_DATA_ROOT";

#[derive(Parser, Debug)]
#[command(name = "slmgan", version, about = "Desk-scale voice conversion with SLM discriminators")]
struct Cli {
    /// Compute device; only `cpu` is built in.
    #[arg(long, global = true, default_value = "cpu")]
    device: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Scan per-speaker WAV folders and write a dataset manifest.
    Ingest {
        /// Dataset root with one subdirectory per speaker.
        #[arg(long, env = DATA_ROOT_ENV)]
        root: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fraction of speakers held out entirely.
        #[arg(long, default_value_t = 0.2)]
        unseen_fraction: f64,
        /// Manifest path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a run configuration with default or toy settings.
    InitConfig {
        #[arg(long)]
        out: PathBuf,
        /// Use the small single-core preset.
        #[arg(long)]
        toy: bool,
        /// Manifest to record in the configuration.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train (or resume) a model.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run directory for checkpoints and the loss log.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the configuration.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the manifest in the configuration.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Continue from the newest checkpoint in `--out`.
        #[arg(long)]
        resume: bool,
        /// Stop after this many completed epochs.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Convert a source utterance toward the voice of a reference utterance.
    Convert {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        src: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// When given, the checkpoint must match its audio and network settings.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Per-layer importance of the SLM critic's projection head, as CSV.
    AnalyzeWeights {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = NormArg::Frobenius)]
        norm: NormArg,
    },
    /// Time conversion of the given files and report the real-time factor.
    BenchRtf {
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSON report path; printed to stdout as well.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(required = true)]
        wavs: Vec<PathBuf>,
    },
    /// Write a synthetic multi-speaker corpus.
    MakeFixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        speakers: usize,
        #[arg(long, default_value_t = 6)]
        utterances: usize,
        #[arg(long, default_value_t = 1.0)]
        seconds: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum NormArg {
    Frobenius,
    L1,
}

impl From<NormArg> for ImportanceNorm {
    fn from(n: NormArg) -> Self {
        match n {
            NormArg::Frobenius => ImportanceNorm::Frobenius,
            NormArg::L1 => ImportanceNorm::L1,
        }
    }
}

fn device(name: &str) -> Result<Device> {
    match name {
        "cpu" => Ok(Device::Cpu),
        other => bail!("unsupported device {other:?} (available: cpu)"),
    }
}

fn run(cli: Cli) -> Result<()> {
    let dev = device(&cli.device)?;
    match cli.command {
        Command::Ingest {
            root,
            seed,
            unseen_fraction,
            out,
        } => {
            let m = ingest(&root, seed, unseen_fraction)?;
            m.save(&out)?;
            println!(
                "{} seen / {} unseen speakers, {} training utterances -> {}",
                m.roster().len(),
                m.unseen().len(),
                m.train_paths().len(),
                out.display()
            );
        }
        Command::InitConfig { out, toy, manifest } => {
            let mut cfg = if toy { RunConfig::toy() } else { RunConfig::default() };
            cfg.manifest = manifest;
            cfg.save(&out)?;
            println!("wrote {}", out.display());
        }
        Command::Train {
            config,
            out,
            seed,
            manifest,
            resume,
            stop_after,
        } => {
            let mut cfg = RunConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(m) = manifest {
                cfg.manifest = Some(m);
            }
            if let Some(m) = &cfg.manifest {
                DatasetManifest::load(m).with_context(|| format!("loading manifest {}", m.display()))?;
            }
            let opts = RunOptions {
                resume,
                stop_after_epoch: stop_after,
            };
            let s = run_from_manifest(&cfg, &out, opts, &dev)?;
            println!(
                "{} epochs, {} steps; checkpoint {}",
                s.epochs_completed,
                s.global_step,
                s.checkpoint.display()
            );
        }
        Command::Convert {
            checkpoint,
            src,
            reference,
            out,
            config,
        } => {
            let expected = config.as_deref().map(RunConfig::load).transpose()?;
            let wav = commands::convert(&src, &reference, &checkpoint, &out, expected.as_ref(), &dev)?;
            println!("{} samples at {} Hz -> {}", wav.len(), wav.sample_rate_hz(), out.display());
        }
        Command::AnalyzeWeights { checkpoint, out, norm } => {
            let imp = commands::analyze_weights(&checkpoint, &out, norm.into())?;
            print!("{}", imp.to_csv());
        }
        Command::BenchRtf { checkpoint, out, wavs } => {
            let report = commands::bench_rtf(&checkpoint, &wavs, &dev)?;
            let json = serde_json::to_string_pretty(&report)?;
            println!("{json}");
            println!("reference GPU RTF (context only): {REFERENCE_GPU_RTF}");
            if let Some(p) = out {
                std::fs::write(&p, json).with_context(|| format!("writing {}", p.display()))?;
            }
        }
        Command::MakeFixture {
            out,
            speakers,
            utterances,
            seconds,
            seed,
        } => {
            if speakers < 2 {
                bail!("need at least two speakers");
            }
            let roster = synth::roster(speakers);
            let paths = synth::write_corpus(&out, &roster, utterances, seconds, 22_050, seed)?;
            println!("wrote {} files under {}", paths.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
