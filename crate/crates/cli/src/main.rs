//! `edgevo` command-line front end.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{BiasArgs, EvalArgs, FieldsArgs, FitArgs, TrackArgs};

#[derive(Debug, Parser)]
#[command(name = "edgevo", version, about = "Edge-based RGB-D visual odometry")]
struct Cli {
    /// TOML file whose `[<subcommand>]` table overrides command-line flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run visual odometry on a TUM-format sequence.
    Track(TrackArgs),
    /// Relative and absolute trajectory errors between two trajectory files.
    Eval(EvalArgs),
    /// Partial-observation bias experiment on a synthetic circle.
    Bias(BiasArgs),
    /// Build distance / nearest-neighbour fields for one image.
    Fields(FieldsArgs),
    /// Fit sensor models to a residual dump.
    Fit(FitArgs),
}

/// Failure classes mapped to process exit codes.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
    Tracking(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Tracking(_) => 3,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Usage(e) | Failure::Data(e) | Failure::Tracking(e) => e,
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let file = cli.config.as_deref().map(config::load).transpose().map_err(Failure::Usage)?;
    let file = file.as_ref();
    match cli.command {
        Command::Track(a) => commands::track(config::apply(a, file, "track")?),
        Command::Eval(a) => commands::eval(config::apply(a, file, "eval")?),
        Command::Bias(a) => commands::bias(config::apply(a, file, "bias")?),
        Command::Fields(a) => commands::fields(config::apply(a, file, "fields")?),
        Command::Fit(a) => commands::fit(config::apply(a, file, "fit")?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}
