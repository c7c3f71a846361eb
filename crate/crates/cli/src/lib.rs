//! File formats and the `reweight` command line around `reweight-core`.

pub mod commands;
pub mod config;
pub mod error;
pub mod imageio;
pub mod manifest;
pub mod report;
pub mod weights;

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

pub use config::RunConfig;
pub use error::{CliError, Result, WeightFileError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

/// Illuminant estimation with reweight-unit networks.
#[derive(Debug, Parser)]
#[command(name = "reweight", version)]
pub struct Cli {
    /// Flat key = value run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Weight file to read, or for `train`, to write.
    #[arg(long, global = true)]
    pub weights: Option<PathBuf>,
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_parser = clap::value_parser!(u8).range(1..=3))]
    pub hierarchy: Option<u8>,
    #[arg(long, global = true)]
    pub confidence: Option<Toggle>,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset and its manifest.
    Gen,
    /// Train a network and write weights plus metrics.
    Train,
    /// Score a network and the classical baselines on a manifest.
    Eval,
    /// Estimate the illuminant of one image.
    Infer {
        image: PathBuf,
        /// Also write the white-balanced image here (16-bit PPM).
        #[arg(long)]
        corrected: Option<PathBuf>,
    },
    /// Write reweighting maps and the confidence-versus-error scatter.
    Inspect { image: Option<PathBuf> },
}

impl Cli {
    /// File, then `REWEIGHT_*` variables from `env`, then flags.
    pub fn run_config(&self, env: impl IntoIterator<Item = (String, String)>) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref(), env)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(h) = self.hierarchy {
            cfg.hierarchy = h.into();
        }
        if let Some(c) = self.confidence {
            cfg.confidence = c == Toggle::On;
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        if let Some(m) = &self.manifest {
            cfg.manifest = Some(m.clone());
        }
        if let Some(o) = &self.out {
            cfg.out = Some(o.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn run(cli: &Cli, env: impl IntoIterator<Item = (String, String)>, out: &mut dyn Write) -> Result<()> {
    let cfg = cli.run_config(env)?;
    let weights = cli.weights.as_deref();
    match &cli.command {
        Command::Gen => commands::gen(&cfg, cli.force, out),
        Command::Train => commands::train(&cfg, weights, cli.force, out),
        Command::Eval => commands::eval(&cfg, weights, cli.force, out),
        Command::Infer { image, corrected } => {
            commands::infer(&cfg, weights, image, corrected.as_deref(), cli.force, out)
        }
        Command::Inspect { image } => commands::inspect(&cfg, weights, image.as_deref(), cli.force, out),
    }
}
