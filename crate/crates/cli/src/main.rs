use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tdsv_cli::commands::{self, Branch, Dataset, FusionInputs, ScoreInputs, Split, DEFAULT_GRID};
use tdsv_cli::RunConfig;
use tdsv_core::pooling::PoolingMode;
use tdsv_core::scoring::FusionStrategy;
use tdsv_core::Result;

#[derive(Parser)]
#[command(name = "tdsv", version, about = "Text-dependent speaker verification toolkit")]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every stochastic stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Use the full-size published architecture.
    #[arg(long, global = true)]
    paper_shapes: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct CorpusArg {
    /// Corpus directory (defaults to paths.corpus_dir).
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize the digit-string corpus.
    SynthData {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a trial list for a corpus split.
    Trials {
        #[command(flatten)]
        corpus: CorpusArg,
        #[arg(long, default_value = "eval")]
        split: Split,
        /// Trials per family instead of every pair.
        #[arg(long)]
        per_family: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one branch and write its checkpoint and loss log.
    Train {
        #[arg(long)]
        branch: Branch,
        #[command(flatten)]
        corpus: CorpusArg,
        /// Checkpoint path (defaults to <checkpoint_dir>/<branch>.ckpt).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Start from the parameters of an earlier checkpoint.
        #[arg(long)]
        init_from: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Speaker pooling mode (A, M, S, A+S, M+S, A+M+S).
        #[arg(long)]
        mode: Option<PoolingMode>,
        /// Text embedding archive (fusion-cnn).
        #[arg(long)]
        text_emb: Option<PathBuf>,
        /// Speaker embedding archive (fusion-cnn).
        #[arg(long)]
        speaker_emb: Option<PathBuf>,
    },
    /// Embed a corpus split with a text or speaker checkpoint.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        corpus: CorpusArg,
        #[arg(long, default_value = "eval")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a trial list and report metrics.
    Score {
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        speaker_emb: PathBuf,
        #[arg(long)]
        text_emb: Option<PathBuf>,
        #[arg(long, default_value = "mul")]
        strategy: FusionStrategy,
        #[arg(long)]
        fusion_ckpt: Option<PathBuf>,
        /// Score file (defaults to <output_dir>/scores-<strategy>.txt).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Metrics JSON (defaults to <output_dir>/metrics-<strategy>.json).
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Train and evaluate the speaker branch over a window/stride grid.
    SweepPooling {
        #[command(flatten)]
        corpus: CorpusArg,
        /// Comma-separated w:s pairs.
        #[arg(long)]
        grid: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the speaker branch's intermediate shapes for one input.
    Shapes {
        #[arg(long, default_value_t = 200)]
        frames: usize,
    },
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if cli.paper_shapes {
        cfg = cfg.paper_shapes();
    }
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s);
    }
    Ok(cfg)
}

fn corpus_dir(cfg: &RunConfig, c: &CorpusArg) -> PathBuf {
    c.corpus.clone().unwrap_or_else(|| cfg.paths.corpus_dir.clone())
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string(v)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = resolve(&cli)?;
    match cli.cmd {
        Cmd::SynthData { out } => {
            let out = out.unwrap_or_else(|| cfg.paths.corpus_dir.clone());
            print_json(&commands::cmd_synth_data(&cfg, &out)?)
        }
        Cmd::Trials { corpus, split, per_family, out } => {
            if per_family.is_some() {
                cfg.trials.per_family = per_family;
            }
            let data = Dataset::load(&cfg, &corpus_dir(&cfg, &corpus))?;
            let list = commands::cmd_make_trials(&cfg, &data, split, &out)?;
            print_json(&serde_json::json!({ "trials": list.len(), "out": out }))
        }
        Cmd::Train { branch, corpus, out, init_from, epochs, mode, text_emb, speaker_emb } => {
            if let Some(e) = epochs {
                match branch {
                    Branch::Text => cfg.text_train.epochs = e,
                    Branch::Speaker => cfg.speaker_train.epochs = e,
                    Branch::FusionCnn => cfg.fusion_train.epochs = e,
                }
            }
            if let Some(m) = mode {
                cfg.speaker.pooling.mode = m;
            }
            let data = Dataset::load(&cfg, &corpus_dir(&cfg, &corpus))?;
            let name = match branch {
                Branch::Text => commands::KIND_TEXT,
                Branch::Speaker => commands::KIND_SPEAKER,
                Branch::FusionCnn => commands::KIND_FUSION,
            };
            let out = out.unwrap_or_else(|| cfg.paths.checkpoint_dir.join(format!("{name}.ckpt")));
            let fusion = match (&text_emb, &speaker_emb) {
                (Some(t), Some(s)) => Some(FusionInputs { text_emb: t, speaker_emb: s }),
                _ => None,
            };
            print_json(&commands::cmd_train(&cfg, branch, &data, &out, init_from.as_deref(), fusion)?)
        }
        Cmd::Embed { checkpoint, corpus, split, out } => {
            let data = Dataset::load(&cfg, &corpus_dir(&cfg, &corpus))?;
            let n = commands::cmd_embed(&data, &checkpoint, split, &out)?;
            print_json(&serde_json::json!({ "embeddings": n, "out": out }))
        }
        Cmd::Score { trials, speaker_emb, text_emb, strategy, fusion_ckpt, out, metrics } => {
            let out = out.unwrap_or_else(|| cfg.paths.output_dir.join(format!("scores-{strategy}.txt")));
            let metrics = metrics.unwrap_or_else(|| cfg.paths.output_dir.join(format!("metrics-{strategy}.json")));
            let inputs = ScoreInputs {
                trials: &trials,
                speaker_emb: &speaker_emb,
                text_emb: text_emb.as_deref(),
                fusion_ckpt: fusion_ckpt.as_deref(),
            };
            let r = commands::cmd_score(&cfg, &inputs, strategy, &out, &metrics)?;
            print_json(&serde_json::json!({ "eer": r.eer, "min_dcf": r.min_dcf, "scores": out, "metrics": metrics }))
        }
        Cmd::SweepPooling { corpus, grid, epochs, out } => {
            if let Some(e) = epochs {
                cfg.speaker_train.epochs = e;
            }
            let grid = match grid {
                Some(g) => commands::parse_grid(&g)?,
                None => DEFAULT_GRID.to_vec(),
            };
            let data = Dataset::load(&cfg, &corpus_dir(&cfg, &corpus))?;
            let out = out.unwrap_or_else(|| cfg.paths.output_dir.join("sweep-pooling.csv"));
            let rows = commands::cmd_sweep_pooling(&cfg, &data, &grid, &out)?;
            print_json(&serde_json::json!({ "rows": rows.len(), "out": out }))
        }
        Cmd::Shapes { frames } => print_json(&commands::cmd_shapes(&cfg, frames)?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tdsv: {e}");
            ExitCode::from(commands::exit_code(&e) as u8)
        }
    }
}
