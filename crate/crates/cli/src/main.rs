use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use collapse_lab_cli::config::ExperimentConfig;
use collapse_lab_cli::error::CliError;
use collapse_lab_cli::experiment::{load_baseline, run_stage, Stage};
use collapse_lab_cli::report::report;

#[derive(Parser)]
#[command(name = "collapse-lab", version, about = "One-shot pruning and BatchNorm recalibration experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the baseline model and save its checkpoint.
    Train(StageArgs),
    /// Train (or load) a baseline and run the pruning grid.
    Prune(StageArgs),
    /// Pruning grid plus variance, prediction and mask-distance reports.
    Diagnose(StageArgs),
    /// Adds BatchNorm recalibration and layer-wise sweeps.
    Reflow(StageArgs),
    /// Every stage including the calibration-size ablations.
    Experiment(StageArgs),
    /// Summarize metrics.csv of a finished run.
    Report {
        /// Run directory containing metrics.csv.
        run_dir: PathBuf,
    },
}

#[derive(Args)]
struct StageArgs {
    /// JSON experiment config. Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, overriding `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed, overriding `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Start from this checkpoint instead of training a baseline.
    #[arg(long)]
    baseline: Option<PathBuf>,
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("COLLAPSE_LAB_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("COLLAPSE_LAB_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))
}

fn run_cli(args: &StageArgs, stage: Stage) -> Result<(), CliError> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let baseline = match &args.baseline {
        Some(p) => Some(load_baseline(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?),
        None => None,
    };
    let artifacts = run_stage(&cfg, stage, baseline)?;
    println!("run {} -> {}", artifacts.run_id, artifacts.out_dir.display());
    for p in &artifacts.reports {
        println!("  {}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match &cli.command {
        Command::Train(a) => run_cli(a, Stage::Train),
        Command::Prune(a) => run_cli(a, Stage::Prune),
        Command::Diagnose(a) => run_cli(a, Stage::Diagnose),
        Command::Reflow(a) => run_cli(a, Stage::Reflow),
        Command::Experiment(a) => run_cli(a, Stage::Experiment),
        Command::Report { run_dir } => report(run_dir).map(|s| print!("{}", s.render())),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
