use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use riskloop_cli::commands::{self, Ablation, Overrides};
use riskloop_cli::tasks::load_tasks;
use riskloop_cli::{load_config, CliError};
use riskloop_core::types::RecoveryMode;

/// Uncertainty-aware workflow runner.
#[derive(Parser)]
#[command(name = "riskloop", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every task and write traces plus a summary.
    Run {
        #[command(flatten)]
        common: Common,
        /// Output directory for traces and summary files.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the task stream once per parameter value.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// One of N, tau_sim, K_max, R, lambda, beta.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<String>,
        /// Directory for sweep.txt and sweep.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Risk deciles, Spearman coefficient and mode tables from a trace directory.
    Report {
        dir: PathBuf,
        /// Directory for report.txt and report.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute derived fields of a trace file or directory and compare.
    Replay { path: PathBuf },
}

#[derive(Args)]
struct Common {
    /// Flat TOML file of engine settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Task file: synthetic task list, stream spec, or live problem file.
    #[arg(long)]
    tasks: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    parallelism: Option<usize>,
    /// Disable a stage; repeatable.
    #[arg(long, value_enum)]
    ablate: Vec<AblateArg>,
    #[arg(long, value_enum)]
    recovery: Option<RecoveryArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblateArg {
    Sensing,
    Branching,
    Refinement,
    Calibration,
}

#[derive(Clone, Copy, ValueEnum)]
enum RecoveryArg {
    RootCause,
    FullRestart,
    LocalRetry,
}

impl Common {
    fn load(&self) -> Result<(riskloop_core::engine::EngineConfig, riskloop_cli::tasks::TaskSource), CliError> {
        let overrides = Overrides {
            seed: self.seed,
            parallelism: self.parallelism,
            ablate: self
                .ablate
                .iter()
                .map(|a| match a {
                    AblateArg::Sensing => Ablation::Sensing,
                    AblateArg::Branching => Ablation::Branching,
                    AblateArg::Refinement => Ablation::Refinement,
                    AblateArg::Calibration => Ablation::Calibration,
                })
                .collect(),
            recovery: self.recovery.map(|r| match r {
                RecoveryArg::RootCause => RecoveryMode::RootCause,
                RecoveryArg::FullRestart => RecoveryMode::FullRestart,
                RecoveryArg::LocalRetry => RecoveryMode::LocalRetry,
            }),
        };
        let cfg = overrides.apply(load_config(self.config.as_deref())?)?;
        Ok((cfg, load_tasks(&self.tasks)?))
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { common, out } => {
            let (cfg, tasks) = common.load()?;
            let summary = commands::cmd_run(&cfg, &tasks, &out)?;
            print!("{}", riskloop_core::report::render_summary(&summary));
        }
        Command::Sweep {
            common,
            param,
            values,
            out,
        } => {
            let (cfg, tasks) = common.load()?;
            let values: Vec<String> = values.into_iter().filter(|v| !v.trim().is_empty()).collect();
            let report = commands::cmd_sweep(&cfg, &tasks, &param, &values)?;
            print!("{}", commands::render_sweep(&report));
            if let Some(out) = out {
                commands::write_sweep(&report, &out)?;
            }
        }
        Command::Report { dir, out } => {
            let report = commands::cmd_report(&dir)?;
            print!("{}", commands::render_report(&report));
            if let Some(out) = out {
                commands::write_report(&report, &out)?;
            }
        }
        Command::Replay { path } => {
            let reports = commands::cmd_replay(&path)?;
            print!("{}", commands::render_replay(&reports));
            let bad = reports.iter().filter(|(_, r)| !r.ok()).count();
            if bad > 0 {
                return Err(CliError::ReplayMismatch(bad));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
