mod artifacts;
mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use crate::artifacts::{RunDir, StageRecord};
use crate::commands::{Context, StageOutput};
use crate::config::ExperimentConfig;
use crate::error::{exit, CliError};

/// Task-aware gated speech enhancement experiments.
#[derive(Debug, Parser)]
#[command(name = "plugin-se", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory for artifacts.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Generate the train and eval corpora.
    Synth,
    /// Train the mask enhancer.
    TrainEnhancer,
    /// Train every configured downstream model.
    TrainDownstream,
    /// Optimize the gate target for each descriptor, with a grid oracle.
    OptimizeGate,
    /// Sweep the gate and write OIR/accuracy curves as CSV.
    Sweep,
    /// Train the weight predictor on a gate target table.
    TrainPredictor,
    /// Run enhancement, predicted gating and downstream inference on one input.
    Infer,
    /// Collect stage records, targets and ordering checks into one report.
    Report,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::TrainEnhancer => "train-enhancer",
            Command::TrainDownstream => "train-downstream",
            Command::OptimizeGate => "optimize-gate",
            Command::Sweep => "sweep",
            Command::TrainPredictor => "train-predictor",
            Command::Infer => "infer",
            Command::Report => "report",
        }
    }
}

fn run(cli: &Cli) -> Result<StageRecord, CliError> {
    let path = cli.config.as_ref().ok_or_else(|| CliError::Config("--config <path> is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let ctx = Context { config_sha256: cfg.hash(), cfg: cfg.resolved(), run: RunDir::new(&cli.out) };
    let start = Instant::now();
    let StageOutput { metrics, files } = match cli.command {
        Command::Synth => commands::synth(&ctx),
        Command::TrainEnhancer => commands::train_enhancer_cmd(&ctx),
        Command::TrainDownstream => commands::train_downstream_cmd(&ctx),
        Command::OptimizeGate => commands::optimize_gate_cmd(&ctx),
        Command::Sweep => commands::sweep_cmd(&ctx),
        Command::TrainPredictor => commands::train_predictor_cmd(&ctx),
        Command::Infer => commands::infer_cmd(&ctx),
        Command::Report => commands::report_cmd(&ctx),
    }?;
    let name = cli.command.name();
    let record = StageRecord::new(&ctx.run, name, ctx.cfg.seed, ctx.config_sha256.clone(), start.elapsed(), &files, metrics)?;
    ctx.run.store(&ctx.run.stage(name), &record)?;
    Ok(record)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = CliError::Config(e.to_string().trim().to_string());
            eprintln!("{}", err.to_json());
            return ExitCode::from(exit::CONFIG as u8);
        }
    };
    match run(&cli) {
        Ok(record) => {
            println!("{}", serde_json::json!({ "stage": record.stage, "wall_clock_s": record.wall_clock_s, "metrics": record.metrics }));
            ExitCode::from(exit::OK as u8)
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
