//! Argument parsing and dispatch for the `dmd` binary.

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use log::warn;

use crate::commands::{self, Run, Source};
use crate::config::RunConfig;
use crate::error::CliResult;

pub const LOG_ENV: &str = "DMD_LOG_LEVEL";

#[derive(Debug, Parser)]
#[command(
    name = "dmd",
    version,
    about = "Distill toy diffusion teachers into one-step generators"
)]
pub struct Args {
    /// TOML run configuration; the two-mode benchmark when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory shared by all stages; overrides `out_dir`.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Overrides teacher steps (train-teacher) or distillation iterations (distill, ablate).
    #[arg(long, global = true, value_name = "N")]
    pub steps: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the diffusion teacher and write teacher.ckpt.
    TrainTeacher,
    /// Record teacher noise/sample pairs into pairs.bin.
    GenPairs,
    /// Distill the teacher into generator.ckpt.
    Distill,
    /// Write samples as CSV, one point per line.
    Sample {
        #[arg(long, value_enum, default_value = "generator")]
        from: Source,
        /// Number of samples; defaults to `sample.n`.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Score samples against the teacher and write metrics.csv and noise_floor.csv.
    Eval {
        #[arg(long, value_enum, default_value = "generator")]
        from: Source,
    },
    /// Distill the full objective and both single-term ablations side by side.
    Ablate,
    /// Check every analytic gradient against finite differences.
    GradCheck {
        /// Add a deliberately wrong backward rule, which must be reported.
        #[arg(long)]
        corrupt: bool,
    },
}

/// Installs the logger from `DMD_LOG_LEVEL` (error, info or debug; info by default).
pub fn init_logging() {
    let requested = std::env::var(LOG_ENV).ok();
    let level = match requested.as_deref() {
        None | Some("") => "info",
        Some(l @ ("error" | "info" | "debug")) => l,
        Some(other) => {
            eprintln!("warning: ignoring {LOG_ENV}={other}; expected error, info or debug");
            "info"
        }
    };
    let _ = env_logger::Builder::new()
        .parse_filters(level)
        .format_timestamp(None)
        .try_init();
}

/// Loads the configuration and applies command-line overrides.
pub fn resolve(args: &Args) -> CliResult<Run> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::two_mode(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(steps) = args.steps {
        match args.command {
            Command::TrainTeacher => cfg.teacher.steps = steps,
            Command::Distill | Command::Ablate => cfg.distill.iterations = steps,
            _ => warn!("--steps has no effect on this command"),
        }
        cfg.validate()?;
    }
    Ok(Run::new(cfg, args.out.clone()))
}

pub fn dispatch(args: Args) -> CliResult<()> {
    let run = resolve(&args)?;
    match args.command {
        Command::TrainTeacher => commands::train_teacher_cmd(&run).map(drop),
        Command::GenPairs => commands::gen_pairs_cmd(&run).map(drop),
        Command::Distill => commands::distill_cmd(&run),
        Command::Sample { from, n } => commands::sample_cmd(&run, from, n).map(drop),
        Command::Eval { from } => commands::eval_cmd(&run, from).map(drop),
        Command::Ablate => commands::ablate_cmd(&run).map(drop),
        Command::GradCheck { corrupt } => commands::grad_check_cmd(&run, corrupt),
    }
}
