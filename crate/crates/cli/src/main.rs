mod commands;
mod manifest;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use u5mr_core::{Error, Result};

use settings::{Overrides, Settings, ENV_PREFIX};

#[derive(Debug, Parser)]
#[command(name = "u5mr", version, about = "Space-time small-area estimation of under-five mortality")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true, env = "U5MR_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for inputs produced by earlier stages and for all outputs.
    #[arg(long, global = true, env = "U5MR_OUT_DIR", default_value = "out")]
    out_dir: PathBuf,
    /// Worker threads; defaults to the available cores.
    #[arg(long, global = true, env = "U5MR_THREADS")]
    threads: Option<usize>,
    #[arg(long, short, global = true)]
    verbose: bool,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Simulate a truth surface, surveys and the bias table.
    Simulate,
    /// Design-based direct estimates for the full, training and test data.
    Direct,
    /// Fit the model to the training data.
    Fit,
    /// Posterior U5MR surfaces on the grid.
    Predict,
    /// County and national series, drop and pixel-ratio summaries.
    Aggregate,
    /// Holdout comparison of weighted and smoothed estimates.
    Evaluate,
    /// Every stage in order.
    Pipeline,
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config {
                path: "flag:--threads".into(),
                line: 0,
                message: "must be at least 1".into(),
            });
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Validation(format!("thread pool: {e}")))?;
    }
    let env = std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX));
    let overrides = Overrides { seed: cli.seed };
    let s = Settings::resolve(cli.config.as_deref(), env, &cli.out_dir, &overrides)?;
    if !matches!(cli.command, Command::Simulate | Command::Pipeline) && !s.out_dir.is_dir() {
        return Err(Error::MissingInputs(vec![s.out_dir.clone()]));
    }
    match cli.command {
        Command::Simulate => commands::simulate(&s),
        Command::Direct => commands::direct(&s),
        Command::Fit => commands::fit_cmd(&s),
        Command::Predict => commands::predict(&s),
        Command::Aggregate => commands::aggregate(&s),
        Command::Evaluate => commands::evaluate(&s),
        Command::Pipeline => commands::pipeline(&s),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is_usage_error() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
