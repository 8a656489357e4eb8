use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ris_core::harness::{
    emit_results, render, run_estimate_once, run_fig2, run_fig3, run_trajectory, ExperimentConfig,
    OutputFormat, ResultTable, TableRow,
};

#[derive(Parser)]
#[command(name = "ris-track", version, about = "RIS channel estimation and tracking experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Average SE versus pilot length for MLE (random and smart init), LS and perfect CSI.
    Fig2(Common),
    /// SE over time while tracking a walking user with periodic RIS updates.
    Track(Common),
    /// One estimation session on a random channel.
    EstimateOnce {
        #[command(flatten)]
        common: Common,
        /// Number of pilots.
        #[arg(long, default_value_t = 6)]
        pilots: usize,
    },
    /// The user trajectory used by `track`.
    Trajectory(Common),
}

#[derive(Args)]
struct Common {
    /// TOML file with experiment settings; unset keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output file; prints to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Worker threads, overrides the config file.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl From<Format> for OutputFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => OutputFormat::Csv,
            Format::Json => OutputFormat::Json,
        }
    }
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if self.workers.is_some() {
            cfg.workers = self.workers;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn write<R: TableRow>(&self, table: ResultTable<R>) -> Result<()> {
        match &self.out {
            Some(path) => emit_results(&table, path, self.format.into())?,
            None => print!("{}", render(&table, self.format.into())?),
        }
        Ok(())
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fig2(c) => {
            let cfg = c.config()?;
            let rows = run_fig2(&cfg).context("fig2 experiment failed")?;
            c.write(ResultTable::new("fig2", &cfg, rows))
        }
        Command::Track(c) => {
            let cfg = c.config()?;
            let rows = run_fig3(&cfg).context("tracking experiment failed")?;
            c.write(ResultTable::new("fig3", &cfg, rows))
        }
        Command::EstimateOnce { common, pilots } => {
            let cfg = common.config()?;
            let row = run_estimate_once(&cfg, pilots).context("estimation failed")?;
            common.write(ResultTable::new("estimate_once", &cfg, vec![row]))
        }
        Command::Trajectory(c) => {
            let cfg = c.config()?;
            let rows = run_trajectory(&cfg)?;
            c.write(ResultTable::new("trajectory", &cfg, rows))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
