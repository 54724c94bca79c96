// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use headprobe::experiment::{cmd_report, Experiment, ExperimentConfig, RunEntry};
use headprobe::fixtures::{write_tiny_workspace, TinyModelSpec};
use headprobe::{load_model, Result};

#[derive(Parser)]
#[command(
    name = "headprobe",
    version,
    about = "Attention-head probing and masking experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Override the output directory.
    #[arg(short, long)]
    output_dir: Option<PathBuf>,
    /// Override the worker thread count.
    #[arg(short = 'j', long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Score every head's copy-paste retrieval over the detection split.
    DetectHeads(RunArgs),
    /// Two-turn conversations without masking.
    FlipEval(RunArgs),
    /// Mask top retrieval heads and random heads.
    MaskSweep(RunArgs),
    /// Label training conversations, build head sets, mask them on the test split.
    Uncertainty(RunArgs),
    /// Masking with injected wrong first answers.
    Control(RunArgs),
    /// Multiple-choice evaluation under mask settings.
    Downstream(RunArgs),
    /// Every experiment command in order, then the report.
    All(RunArgs),
    /// Rebuild every table from the records in an output directory.
    Report { output_dir: PathBuf },
    /// Write a tiny random model, tokenizer, corpus and config.
    InitTiny { dir: PathBuf },
    /// Print the default config for a full-size model.
    DefaultConfig,
}

fn open(args: &RunArgs) -> Result<Experiment> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(dir) = &args.output_dir {
        config.output_dir = dir.clone();
    }
    if let Some(t) = args.threads {
        config.threads = t;
    }
    config.validate_model_paths()?;
    let backend = load_model(&config.model.weights, &config.model.tokenizer)?;
    Experiment::with_backend(config, Arc::new(backend))
}

fn show(name: &str, entry: &RunEntry) {
    println!("{name}: {} records", entry.n_records);
    for t in &entry.tables {
        println!("  {t}");
    }
}

fn report(dir: &Path) -> Result<()> {
    let summary = cmd_report(dir)?;
    for w in &summary.written {
        println!("  {w}");
    }
    for n in &summary.notices {
        println!("note: {n}");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::DetectHeads(a) => show("detect-heads", &open(&a)?.cmd_detect_heads()?),
        Command::FlipEval(a) => show("flip-eval", &open(&a)?.cmd_flip_eval()?),
        Command::MaskSweep(a) => show("mask-sweep", &open(&a)?.cmd_mask_sweep()?),
        Command::Uncertainty(a) => show("uncertainty", &open(&a)?.cmd_uncertainty_pipeline()?),
        Command::Control(a) => show("control", &open(&a)?.cmd_control()?),
        Command::Downstream(a) => show("downstream", &open(&a)?.cmd_downstream()?),
        Command::All(a) => {
            let exp = open(&a)?;
            show("detect-heads", &exp.cmd_detect_heads()?);
            show("flip-eval", &exp.cmd_flip_eval()?);
            show("mask-sweep", &exp.cmd_mask_sweep()?);
            show("uncertainty", &exp.cmd_uncertainty_pipeline()?);
            show("control", &exp.cmd_control()?);
            show("downstream", &exp.cmd_downstream()?);
            println!("report:");
            report(exp.output_dir())?;
        }
        Command::Report { output_dir } => report(&output_dir)?,
        Command::InitTiny { dir } => {
            let ws = write_tiny_workspace(&dir, &TinyModelSpec::default())?;
            println!("wrote {}", ws.config.display());
        }
        Command::DefaultConfig => print!("{}", ExperimentConfig::default().to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
