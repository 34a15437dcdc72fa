//! `mvc`: corpus generation, augmentation, beamforming, pre-training,
//! fine-tuning and evaluation from the command line.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mvc_core::audio::{read_wav, write_wav, MultiChannelRecording};
use mvc_core::gradcheck::{run_suites, TOLERANCE};
use mvc_core::pipelines::eval::{augmented_pairs, channel_pairs};
use mvc_core::pipelines::{
    build_replay_mixture, continual_pretrain, evaluate, finetune_ctc, pretrain, representation_consistency,
    supervised_transfer, Checkpoint, MetricRecord, MetricsLog, PipelineConfig, ReplayRate,
};
use mvc_core::synthcorpus::{generate_clean_corpus, generate_multichannel_corpus, CorpusSpec, Manifest, Utterance};
use mvc_core::variants::{augment, delay_and_sum, MvcMode};
use mvc_core::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser, Debug)]
#[command(name = "mvc", version, about, arg_required_else_help = true)]
struct Cli {
    /// Pipeline configuration (TOML). Flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for all randomness.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads per batch.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Training steps of the selected stage.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Replay rate `r:c` of target to replayed source data.
    #[arg(long, global = true)]
    replay_rate: Option<ReplayRate>,
    /// Variant construction for the corpus being trained on:
    /// da, mc, eh, da+mc, da+mc+eh or none.
    #[arg(long, global = true)]
    mvc_mode: Option<MvcMode>,
    /// Metrics file (JSON lines); stdout when absent.
    #[arg(long, global = true)]
    metrics: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum CorpusKind {
    Clean,
    Noisy,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum PairKind {
    /// Original against an augmented copy.
    Augmented,
    /// Two microphones of a multichannel recording.
    Channels,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes a synthetic corpus (WAV files plus manifest.jsonl).
    GenCorpus {
        #[arg(long, value_enum, default_value = "clean")]
        kind: CorpusKind,
        #[arg(long)]
        utterances: Option<usize>,
        /// Corpus specification (TOML) replacing the preset.
        #[arg(long)]
        corpus_config: Option<PathBuf>,
    },
    /// Augments WAV files; provenance goes to augment.jsonl.
    Augment {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Delay-and-sum beamforms multichannel WAV files.
    Beamform {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value_t = 0)]
        ref_channel: usize,
        #[arg(long, default_value_t = 16)]
        max_lag: usize,
    },
    /// Self-supervised pre-training from scratch.
    Pretrain {
        #[arg(long)]
        source: PathBuf,
        /// Target corpus, used when the config selects data mixing.
        #[arg(long)]
        target: Option<PathBuf>,
    },
    /// Continual pre-training of a checkpoint on target data with replay.
    Continue {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
    },
    /// CTC fine-tuning on labeled data.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        labeled: PathBuf,
    },
    /// CTC fine-tuning on the source corpus, then on the target corpus.
    Transfer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
    },
    /// Token error rate and masked-prediction accuracy on held-out data.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
    /// Mean cosine similarity of representations across variant pairs.
    Consistency {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "augmented")]
        pairs: PairKind,
    },
    /// Finite-difference checks of every analytic gradient.
    Gradcheck {
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
    },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            PipelineConfig::from_toml(&text)?
        }
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(r) = cli.replay_rate {
        cfg.replay_rate = r;
    }
    Ok(cfg)
}

fn load_corpus(path: &Path) -> Result<Vec<Utterance>> {
    Manifest::read(path)?.load()
}

fn metrics_log(cli: &Cli) -> Result<MetricsLog> {
    let sink: Box<dyn Write + Send> = match &cli.metrics {
        Some(path) => Box::new(File::create(path).map_err(|e| Error::io(path, e))?),
        None => Box::new(std::io::stdout()),
    };
    Ok(MetricsLog::streaming(sink))
}

fn output_dir(cli: &Cli) -> Result<&Path> {
    fs::create_dir_all(&cli.out).map_err(|e| Error::io(&cli.out, e))?;
    Ok(&cli.out)
}

fn save(ck: &Checkpoint, cli: &Cli, name: &str) -> Result<()> {
    let path = output_dir(cli)?.join(format!("{name}.ckpt"));
    ck.save(&path)?;
    eprintln!("checkpoint written to {}", path.display());
    Ok(())
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "audio".into(), |s| s.to_string_lossy().into_owned())
}

fn run(cli: &Cli) -> Result<()> {
    let mut cfg = load_config(cli)?;
    match &cli.command {
        Command::GenCorpus {
            kind,
            utterances,
            corpus_config,
        } => {
            let mut spec = match corpus_config {
                Some(path) => {
                    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                    toml::from_str(&text).map_err(|e| Error::Argument(format!("corpus config: {e}")))?
                }
                None => match kind {
                    CorpusKind::Clean => CorpusSpec::default(),
                    CorpusKind::Noisy => CorpusSpec::noisy_multichannel(),
                },
            };
            if let Some(n) = utterances {
                spec.num_utterances = *n;
            }
            if let Some(seed) = cli.seed {
                spec.seed = seed;
            }
            let dir = output_dir(cli)?;
            let manifest = match kind {
                CorpusKind::Clean => generate_clean_corpus(&spec, dir)?,
                CorpusKind::Noisy => generate_multichannel_corpus(&spec, dir)?,
            };
            eprintln!("{} utterances written to {}", manifest.len(), dir.display());
        }
        Command::Augment { inputs } => {
            let policy = cfg.augment.policy(cfg.seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let dir = output_dir(cli)?;
            let sidecar = dir.join("augment.jsonl");
            let mut lines = String::new();
            for input in inputs {
                let rec = read_wav(input)?;
                let mut channels = Vec::with_capacity(rec.num_channels());
                let mut records = Vec::with_capacity(rec.num_channels());
                for ch in rec.channels() {
                    let (w, r) = augment(ch, &policy, &mut rng)?;
                    channels.push(w);
                    records.push(r);
                }
                let out = dir.join(format!("{}_aug.wav", file_stem(input)));
                write_wav(&MultiChannelRecording::new(channels)?, &out)?;
                let line = serde_json::json!({
                    "input": input,
                    "output": out,
                    "seed": cfg.seed,
                    "channels": records,
                });
                lines.push_str(&serde_json::to_string(&line)?);
                lines.push('\n');
            }
            fs::write(&sidecar, lines).map_err(|e| Error::io(&sidecar, e))?;
            eprintln!("{} files augmented, provenance in {}", inputs.len(), sidecar.display());
        }
        Command::Beamform {
            inputs,
            ref_channel,
            max_lag,
        } => {
            let dir = output_dir(cli)?;
            let sidecar = dir.join("beamform.jsonl");
            let mut lines = String::new();
            for input in inputs {
                let rec = read_wav(input)?;
                let bf = delay_and_sum(&rec, *ref_channel, *max_lag)?;
                let out = dir.join(format!("{}_bf.wav", file_stem(input)));
                write_wav(&MultiChannelRecording::mono(bf.output), &out)?;
                let line = serde_json::json!({ "input": input, "output": out, "lags": bf.lags });
                lines.push_str(&serde_json::to_string(&line)?);
                lines.push('\n');
            }
            fs::write(&sidecar, lines).map_err(|e| Error::io(&sidecar, e))?;
        }
        Command::Pretrain { source, target } => {
            if let Some(s) = cli.steps {
                cfg.steps = s;
            }
            if let Some(m) = &cli.mvc_mode {
                cfg.source_mvc = m.clone();
            }
            let source = load_corpus(source)?;
            let target = match target {
                Some(t) => load_corpus(t)?,
                None => Vec::new(),
            };
            let mut log = metrics_log(cli)?;
            let ck = pretrain(&cfg, &source, &target, &mut log)?;
            save(&ck, cli, "pretrain")?;
        }
        Command::Continue {
            checkpoint,
            source,
            target,
        } => {
            if let Some(s) = cli.steps {
                cfg.steps = s;
            }
            if let Some(m) = &cli.mvc_mode {
                cfg.target_mvc = m.clone();
            }
            let seed_ckpt = Checkpoint::load(checkpoint)?;
            cfg.model = seed_ckpt.model.config.clone();
            let source = load_corpus(source)?;
            let target = load_corpus(target)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mixture = build_replay_mixture(target.len(), source.len(), cfg.replay_rate, &mut rng)?;
            let mut log = metrics_log(cli)?;
            let ck = continual_pretrain(&seed_ckpt, &mixture, &source, &target, &cfg, &mut log)?;
            save(&ck, cli, "continual")?;
        }
        Command::Finetune { checkpoint, labeled } => {
            if let Some(s) = cli.steps {
                cfg.finetune.steps = s;
            }
            let ckpt = Checkpoint::load(checkpoint)?;
            let labeled = load_corpus(labeled)?;
            let mut log = metrics_log(cli)?;
            let ck = finetune_ctc(&ckpt, &labeled, &cfg, &mut log)?;
            save(&ck, cli, "finetune")?;
        }
        Command::Transfer {
            checkpoint,
            source,
            target,
        } => {
            if let Some(s) = cli.steps {
                cfg.finetune.steps = s;
                cfg.finetune.target_steps = s;
            }
            let ckpt = Checkpoint::load(checkpoint)?;
            let source = load_corpus(source)?;
            let target = load_corpus(target)?;
            let mut log = metrics_log(cli)?;
            let ck = supervised_transfer(&ckpt, &source, &target, &cfg, &mut log)?;
            save(&ck, cli, "transfer")?;
        }
        Command::Evaluate { checkpoint, test } => {
            let ckpt = Checkpoint::load(checkpoint)?;
            cfg.model = ckpt.model.config.clone();
            let test = load_corpus(test)?;
            let metrics = evaluate(&ckpt.model, &test, &cfg)?;
            metrics_log(cli)?.push(MetricRecord::Eval(metrics))?;
        }
        Command::Consistency {
            checkpoint,
            data,
            pairs,
        } => {
            let ckpt = Checkpoint::load(checkpoint)?;
            let utts = load_corpus(data)?;
            let sets = match pairs {
                PairKind::Augmented => augmented_pairs(&utts, &cfg.augment.policy(cfg.seed)?, cfg.seed)?,
                PairKind::Channels => channel_pairs(&utts, cfg.seed)?,
            };
            let value = representation_consistency(&ckpt.model, &sets)?;
            metrics_log(cli)?.push(MetricRecord::Consistency {
                value,
                pairs: sets.len(),
            })?;
        }
        Command::Gradcheck { eps } => {
            let results = run_suites(*eps, cfg.seed)?;
            let mut worst: f64 = 0.0;
            for r in &results {
                println!("{}", serde_json::to_string(r)?);
                worst = worst.max(r.max_rel_error);
            }
            println!("max rel. error {worst:.3e}");
            if !results.iter().all(|r| r.passed()) {
                return Err(Error::Contract(format!(
                    "gradient check failed: {worst:.3e} > {TOLERANCE:e}"
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.class());
            ExitCode::from(1)
        }
    }
}
