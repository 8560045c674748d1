//! `xdom` — staged OOD-detection pipeline driver.
//!
//! Each subcommand runs one pipeline stage against a run directory
//! described by a TOML config; `all` runs the whole chain. Exit codes:
//! 0 success, 1 usage or configuration problem, 2 missing or stale
//! prerequisite artifacts, 3 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use xdom_core::metrics::report::{load_report, summary_table};
use xdom_core::pipeline::{Pipeline, RunConfig, Stage};
use xdom_core::Error;

#[derive(Parser)]
#[command(name = "xdom", version, about = "Dense-prediction OOD detection pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration file (TOML).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Re-run this stage even if its artifacts are up to date.
    #[arg(long, value_name = "NAME")]
    force_stage: Option<String>,
    /// Override the configured top-level seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Mark the run as requiring bit-reproducibility (recorded in
    /// artifacts; runs are deterministic either way).
    #[arg(long)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the dataset: ID train/test plus the OOD eval splits.
    Synth(CommonArgs),
    /// Train the K-class classifier on the ID train split.
    TrainCls(CommonArgs),
    /// Derive pseudo-masks for the train split from classifier attention.
    Masks(CommonArgs),
    /// Train the (K+1)-class dense predictor from the pseudo-masks.
    TrainDense(CommonArgs),
    /// Convert the dense predictor into an image-level classifier.
    Convert(CommonArgs),
    /// Score the eval splits with every configured scorer.
    Score(CommonArgs),
    /// Compute detection metrics and write the evaluation report.
    Eval(CommonArgs),
    /// Render score-distribution plots from the report.
    Plot(CommonArgs),
    /// Run every stage in order, skipping up-to-date ones.
    All(CommonArgs),
}

impl Command {
    /// The single stage this subcommand runs, or None for `all`.
    fn stage(&self) -> Option<Stage> {
        match self {
            Command::Synth(_) => Some(Stage::Synth),
            Command::TrainCls(_) => Some(Stage::TrainCls),
            Command::Masks(_) => Some(Stage::Masks),
            Command::TrainDense(_) => Some(Stage::TrainDense),
            Command::Convert(_) => Some(Stage::Convert),
            Command::Score(_) => Some(Stage::Score),
            Command::Eval(_) => Some(Stage::Eval),
            Command::Plot(_) => Some(Stage::Plot),
            Command::All(_) => None,
        }
    }

    fn common(&self) -> &CommonArgs {
        match self {
            Command::Synth(a)
            | Command::TrainCls(a)
            | Command::Masks(a)
            | Command::TrainDense(a)
            | Command::Convert(a)
            | Command::Score(a)
            | Command::Eval(a)
            | Command::Plot(a)
            | Command::All(a) => a,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Help and version requests are not errors.
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 1,
        Error::Dependency { .. } | Error::StaleArtifact { .. } => 2,
        _ => 3,
    }
}

fn run(cli: Cli) -> xdom_core::Result<()> {
    let common = cli.command.common();
    let mut config = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if common.deterministic {
        config.deterministic = true;
    }
    let force = common
        .force_stage
        .as_deref()
        .map(Stage::parse)
        .transpose()?;
    let pipeline = Pipeline::new(config)?;
    match cli.command.stage() {
        None => {
            pipeline.run_all(force)?;
        }
        Some(stage) => {
            if let Some(forced) = force {
                if forced != stage {
                    return Err(Error::Config(format!(
                        "--force-stage {forced} does not apply to the '{stage}' subcommand; \
                         use the 'all' subcommand to force an arbitrary stage"
                    )));
                }
            }
            let ran = pipeline.run_stage(stage, force == Some(stage))?;
            println!("[{stage}] {}", if ran { "complete" } else { "up to date" });
            if stage == Stage::Eval {
                let report = load_report(&pipeline.report_path())?;
                println!("{}", summary_table(&report));
            }
        }
    }
    Ok(())
}
