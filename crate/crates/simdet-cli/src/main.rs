//! Command-line entry point: data synthesis, training, evaluation, AP-vs-IoU
//! sweeps and gradient checks. Every command is reproducible from its config
//! file and seed; see the guide in `book/` for the config keys and file
//! formats.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use simdet::config::RunConfig;
use simdet::data::Track;
use simdet::runner::{self, ModelKind};

#[derive(Parser)]
#[command(
    name = "simdet",
    about = "One-shot detection with attention similarity networks, baselines included",
    version
)]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

/// Global flags that override values from the config file.
#[derive(Args)]
struct Overrides {
    /// Run configuration file (key = value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config's track (image | sequence).
    #[arg(long, global = true)]
    track: Option<String>,
    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Forces fully deterministic single-threaded execution.
    #[arg(long, global = true)]
    single_thread: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesises a dataset (splits, training pairs, N-way evaluation sets).
    Synth,
    /// Trains the similarity network on a synthesised dataset.
    Train {
        /// Dataset directory written by `synth`.
        #[arg(long)]
        dataset: PathBuf,
        /// Continue from a `checkpoint_last.bin` of a previous run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Calibrates on validation and reports AP and precision-at-recall on test.
    Eval {
        /// simnet | dtw | exemplar | random
        #[arg(long)]
        model: String,
        #[arg(long)]
        dataset: PathBuf,
        /// Model checkpoint (required for simnet).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Writes AP at each IoU threshold for a trained network.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Runs the gradient-check suite and exits nonzero on failure.
    Gradcheck,
}

fn load_config(overrides: &Overrides) -> Result<RunConfig> {
    let mut cfg = match &overrides.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("cannot read config {}", path.display()))?;
            RunConfig::parse(&text).context("bad config file")?
        }
        None => {
            let track = match overrides.track.as_deref() {
                Some("sequence") => Track::Sequence,
                _ => Track::Image,
            };
            RunConfig::default_for(track)
        }
    };
    if let Some(track) = &overrides.track {
        cfg.track = match track.as_str() {
            "image" => Track::Image,
            "sequence" => Track::Sequence,
            other => anyhow::bail!("unknown track {other:?} (image | sequence)"),
        };
    }
    if let Some(seed) = overrides.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &overrides.out {
        cfg.out_dir = out.clone();
    }
    if overrides.single_thread {
        cfg.single_thread = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    let cfg = load_config(&cli.overrides)?;

    match cli.command {
        Command::Synth => {
            let dir = runner::cmd_synth(&cfg)?;
            println!("dataset written to {}", dir.display());
        }
        Command::Train { dataset, resume } => {
            let out = runner::cmd_train(&cfg, &dataset, resume.as_deref())?;
            println!(
                "trained {} epochs; best validation AP {:.4} at epoch {}",
                cfg.epochs, out.best_val_ap, out.best_epoch
            );
            println!("best checkpoint: {}", out.checkpoint_best.display());
            println!("loss trace:      {}", out.loss_csv.display());
        }
        Command::Eval { model, dataset, checkpoint } => {
            let kind: ModelKind = model.parse()?;
            let reports = runner::cmd_eval(&cfg, kind, &dataset, checkpoint.as_deref())?;
            for path in reports {
                let text = std::fs::read_to_string(&path)?;
                let report: serde_json::Value = serde_json::from_str(&text)?;
                println!(
                    "{}: AP {:.4} ({})",
                    report["set"].as_str().unwrap_or("?"),
                    report["ap"].as_f64().unwrap_or(f64::NAN),
                    path.display()
                );
            }
        }
        Command::Sweep { checkpoint, dataset } => {
            let files = runner::cmd_sweep(&cfg, &checkpoint, &dataset)?;
            for f in files {
                println!("sweep written to {}", f.display());
            }
        }
        Command::Gradcheck => {
            let report = runner::cmd_gradcheck(cfg.seed)?;
            print!("{}", report.render());
            if !report.all_pass() {
                anyhow::bail!("gradient checks failed");
            }
            println!("all gradient checks passed");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
