use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use paranet_cli::config::{ModelKind, Preset, RunConfig};
use paranet_cli::dataset::ingest;
use paranet_cli::error::CliResult;
use paranet_cli::infer::{self, SynthOptions, Vocoder};
use paranet_cli::toy::{write_toy_corpus, ToyKind};
use paranet_cli::train::{ablate, train, TrainOptions};

#[derive(Parser)]
#[command(name = "paranet", version, about = "Train and run parallel text-to-spectrogram models and a WaveVAE vocoder")]
struct Cli {
    /// TOML run configuration; unset keys take the preset's defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,
    /// Output directory (default depends on the command).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MaskModes {
    On,
    Off,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Featurize a `metadata.csv` + WAV corpus into a dataset cache (default: the configured `corpus`).
    Ingest { corpus_dir: PathBuf },
    /// Train the teacher, ParaNet or WaveVAE on an ingested cache.
    Train {
        #[arg(long, value_enum)]
        model: Option<ModelKind>,
        #[arg(long)]
        steps: Option<u64>,
        /// Teacher checkpoint for ParaNet distillation.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Dataset cache, overriding the configured `corpus`.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Synthesize text with a teacher or ParaNet checkpoint.
    Synthesize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        text: Vec<String>,
        /// `15`, `100` or a file of numbered sentences.
        #[arg(long)]
        test_set: Option<String>,
        /// Restrict attention to a window around the expected position (default).
        #[arg(long, overrides_with = "no_mask")]
        mask: bool,
        #[arg(long)]
        no_mask: bool,
        /// Decoder steps per token for ParaNet; sets output length and key rate.
        #[arg(long)]
        speed: Option<f64>,
        #[arg(long, value_enum, default_value_t = Vocoder::GriffinLim)]
        vocoder: Vocoder,
        #[arg(long)]
        vocoder_checkpoint: Option<PathBuf>,
    },
    /// Time autoregressive against parallel synthesis.
    Bench {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        paranet: PathBuf,
        #[arg(long, default_value = "15")]
        test_set: String,
        #[arg(long, default_value_t = 50)]
        runs: usize,
    },
    /// Count proxy attention errors on the final block.
    AnalyzeAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "100")]
        test_set: String,
        #[arg(long, value_enum, default_value_t = MaskModes::Both)]
        mask: MaskModes,
    },
    /// Train the teacher and each ParaNet variant, reporting alignment quality.
    Ablate {
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Write a synthetic corpus ready for `ingest`.
    ToyCorpus {
        #[arg(long, value_enum, default_value_t = ToyKind::Speech)]
        kind: ToyKind,
    },
    /// Print the resolved configuration as TOML.
    ShowConfig,
}

fn resolve_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p, cli.preset)?,
        None => RunConfig::preset(cli.preset.unwrap_or(Preset::Full)),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = resolve_config(&cli)?;
    match &cli.command {
        Command::Ingest { corpus_dir } => {
            let out = cli.out.clone().unwrap_or_else(|| cfg.corpus.clone());
            let (data, report) = ingest(corpus_dir, &cfg)?;
            let path = data.save(&out, &cfg)?;
            for e in &report.errors {
                eprintln!("line {}: {}", e.line, e.msg);
            }
            println!(
                "ingested {} utterance(s), rejected {}; {:.3} frames per token, {:.3} decoder steps per token",
                report.ingested,
                report.errors.len(),
                report.frames_per_token,
                report.steps_per_token
            );
            println!("cache: {}", path.display());
        }
        Command::Train { model, steps, teacher, corpus } => {
            if let Some(m) = model {
                cfg.model = *m;
            }
            if let Some(c) = corpus {
                cfg.corpus = c.clone();
            }
            let opts = TrainOptions { steps: *steps, teacher: teacher.clone() };
            let s = train(&cfg, &out_dir(&cli, "runs"), &opts)?;
            println!(
                "{} trained {} steps: total {:.5} -> {:.5}",
                cfg.model, s.steps, s.first_total, s.last_total
            );
            println!("log: {}\ncheckpoint: {}", s.log.display(), s.checkpoint.display());
        }
        Command::Synthesize { checkpoint, text, test_set, mask: _, no_mask, speed, vocoder, vocoder_checkpoint } => {
            let vocab = infer::checkpoint_vocabulary(checkpoint)?;
            let inputs = infer::load_inputs(text, test_set.as_deref(), &vocab)?;
            let opts = SynthOptions {
                mask: !no_mask,
                speed: *speed,
                vocoder: *vocoder,
                vocoder_checkpoint: vocoder_checkpoint.clone(),
                seed: cfg.seed,
            };
            let out = out_dir(&cli, "synth");
            let recs = infer::synthesize(checkpoint, &inputs, &opts, &out)?;
            for r in &recs {
                println!(
                    "utt{:03}: {} tokens -> {} steps, {} decoder invocation(s), {} alignment block(s), {}",
                    r.index, r.tokens, r.steps, r.decoder_invocations, r.blocks, r.vocoder
                );
            }
            println!("artifacts: {}", out.display());
        }
        Command::Bench { teacher, paranet, test_set, runs } => {
            let out = out_dir(&cli, "bench");
            let report = infer::bench_checkpoints(teacher, paranet, test_set, *runs, &out)?;
            print!("{}", report.to_csv());
            println!("speedup {:.2}x over {} sentence(s), {} timed run(s) each", report.speedup, report.rows.len(), runs);
        }
        Command::AnalyzeAttention { checkpoint, test_set, mask } => {
            let modes: &[bool] = match mask {
                MaskModes::On => &[true],
                MaskModes::Off => &[false],
                MaskModes::Both => &[false, true],
            };
            let out = out_dir(&cli, "analysis");
            let (_, totals) = infer::analyze_checkpoint(checkpoint, test_set, modes, &out)?;
            print!("{}", infer::totals_csv(&totals));
        }
        Command::Ablate { corpus } => {
            if let Some(c) = corpus {
                cfg.corpus = c.clone();
            }
            let out = out_dir(&cli, "ablation");
            ablate(&cfg, &out)?;
            print!("{}", std::fs::read_to_string(out.join("ablation.csv"))?);
        }
        Command::ToyCorpus { kind } => {
            let out = out_dir(&cli, "toy_corpus");
            let n = write_toy_corpus(&cfg, *kind, &out)?;
            println!("wrote {n} clip(s) to {}", out.display());
        }
        Command::ShowConfig => print!("{}", cfg.to_toml()),
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
