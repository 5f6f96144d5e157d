use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};

use hdrl_cli::{
    cmd_backtest, cmd_ingest, cmd_report, cmd_synth, cmd_train, render_table, BacktestMode,
    ExperimentSelection, Overrides, RunConfig, SynthPreset,
};

#[derive(Parser)]
#[command(name = "hdrl", version, about = "Hierarchical RL portfolio trainer and backtester")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; unset keys take built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Price CSV with a date column and one column per ticker.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output root.
    #[arg(long, env = "HDRL_OUT")]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        RunConfig::load(
            self.config.as_deref(),
            &Overrides {
                data: self.data.clone(),
                out: self.out.clone(),
                seed: self.seed,
            },
        )
    }
}

#[derive(Subcommand)]
enum Command {
    /// Validate a price file and summarize its coverage.
    Ingest {
        #[command(flatten)]
        common: Common,
    },
    /// Train both agents for each selected experiment.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "all")]
        experiment: ExperimentSelection,
    },
    /// Backtest trained agents, an ablation, or the baselines.
    Backtest {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "full")]
        mode: BacktestMode,
        #[arg(long, default_value = "all")]
        experiment: ExperimentSelection,
    },
    /// Merge report CSVs of a run into one comparison table.
    Report {
        /// Run directory; defaults to the configured output root.
        run_dir: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Write a seeded synthetic price file.
    Synth {
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value = "djia")]
        preset: SynthPreset,
        #[arg(long, default_value = "2017-07-03")]
        start: NaiveDate,
        #[arg(long, default_value_t = 1440)]
        days: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest { common } => {
            let s = cmd_ingest(&common.load()?)?;
            println!(
                "{}: {} days from {} to {}, {} assets",
                s.path.display(),
                s.days,
                s.first_date,
                s.last_date,
                s.assets.len()
            );
            println!("assets: {}", s.assets.join(" "));
            if !s.dropped.is_empty() {
                println!("dropped for missing values: {}", s.dropped.join(" "));
            }
            if !s.missing.is_empty() {
                println!("configured but unavailable: {}", s.missing.join(" "));
            }
        }
        Command::Train { common, experiment } => {
            for s in cmd_train(&common.load()?, experiment)? {
                println!(
                    "experiment {}: {} training periods, tracking in {}",
                    s.experiment,
                    s.horizon,
                    s.tracking_csv.display()
                );
            }
        }
        Command::Backtest {
            common,
            mode,
            experiment,
        } => {
            let out = cmd_backtest(&common.load()?, experiment, mode)?;
            println!("{} runs written to {}", out.rows, out.report_csv.display());
        }
        Command::Report { run_dir, common } => {
            let dir = match run_dir {
                Some(d) => d,
                None => common.load()?.out,
            };
            print!("{}", render_table(&cmd_report(&dir)?));
        }
        Command::Synth {
            output,
            preset,
            start,
            days,
            seed,
        } => {
            let s = cmd_synth(&output, preset, start, days, seed)?;
            println!("{}: {} days of {} assets", output.display(), s.n_days(), s.n_assets());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
