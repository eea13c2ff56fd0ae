//! `diffrestore`: reproducible diffusion-prior experiments from the command line.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "diffrestore", version, about = "Score-based diffusion priors for audio restoration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a score network by denoising score matching.
    Train(Common),
    /// Draw unconditional samples.
    Generate(Common),
    /// Restore a degraded recording with a known operator.
    Restore(Common),
    /// Restore a lowpassed recording while estimating the filter.
    Blind(Common),
    /// Predictive first stage followed by task-adapted diffusion.
    Storm(Common),
    /// Check kernel moments against simulation and solver convergence.
    Diagnose(Common),
}

#[derive(Debug, Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, value_parser = ["ve", "vp", "ouve", "bbed"])]
    process: Option<String>,
    #[arg(long, value_parser = ["em", "ode", "heun"])]
    solver: Option<String>,
    /// Degraded input WAV for restore, blind and storm.
    #[arg(long)]
    input: Option<PathBuf>,
}

/// Failure with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub const CONFIG: u8 = 2;
    pub const DIVERGED: u8 = 3;
    pub const NON_FINITE: u8 = 4;
    pub const DIAGNOSE_FAILED: u8 = 5;

    pub fn config(message: impl Into<String>) -> Self {
        Self { code: Self::CONFIG, message: message.into() }
    }
}

impl From<diffrestore::Error> for CliError {
    fn from(e: diffrestore::Error) -> Self {
        use diffrestore::Error as E;
        let code = match e {
            E::Diverged { .. } => Self::DIVERGED,
            E::NonFinite { .. } => Self::NON_FINITE,
            E::InvalidParameter(_)
            | E::MissingObservation(_)
            | E::UnexpectedObservation(_)
            | E::ShapeMismatch { .. }
            | E::NotCola { .. }
            | E::Unsupported { .. }
            | E::Checkpoint(_)
            | E::Wav(_) => Self::CONFIG,
            _ => 1,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self { code: 1, message: e.to_string() }
    }
}

fn resolve(common: &Common, command: &str) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = Some(out.clone());
    }
    if let Some(input) = &common.input {
        cfg.input = Some(input.clone());
    }
    if let Some(p) = &common.process {
        cfg.process.kind = p.clone();
    }
    if let Some(s) = &common.solver {
        cfg.sampler.solver = s.clone();
    }
    if let Some(steps) = common.steps {
        if command == "train" {
            cfg.train.steps = steps;
        } else {
            cfg.sampler.steps = Some(steps);
        }
    }
    cfg.process.resolve()?;
    if command != "train" && command != "diagnose" {
        let solver = cfg.sampler.build(cfg.seed)?;
        cfg.sampler.steps = Some(solver.steps);
    }
    Ok(cfg)
}

fn init_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("DIFFRESTORE_THREADS") {
        let n: usize =
            v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
                CliError::config(format!("DIFFRESTORE_THREADS must be a positive integer, got `{v}`"))
            })?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError { code: 1, message: e.to_string() })?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    let (name, common) = match &cli.command {
        Command::Train(c) => ("train", c),
        Command::Generate(c) => ("generate", c),
        Command::Restore(c) => ("restore", c),
        Command::Blind(c) => ("blind", c),
        Command::Storm(c) => ("storm", c),
        Command::Diagnose(c) => ("diagnose", c),
    };
    let cfg = resolve(common, name)?;
    let out = output::OutDir::create(cfg.out.clone().unwrap_or_else(|| PathBuf::from("out")))?;
    let resolved = cfg.to_toml();
    eprintln!("diffrestore {name}: resolved configuration\n{resolved}");
    out.write_text("config.toml", &resolved)?;
    match cli.command {
        Command::Train(_) => commands::train(&cfg, &out),
        Command::Generate(_) => commands::generate(&cfg, &out),
        Command::Restore(_) => commands::restore(&cfg, &out),
        Command::Blind(_) => commands::blind(&cfg, &out),
        Command::Storm(_) => commands::storm(&cfg, &out),
        Command::Diagnose(_) => commands::diagnose(&cfg, &out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
