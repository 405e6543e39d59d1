// SPDX-License-Identifier: Apache-2.0

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gpusim::experiment::{run_experiment, ExperimentError, ExperimentRun};
use gpusim::failure::{classify_log, RuleSet};
use gpusim::metrics::{diff_reports, DiffError};
use thiserror::Error;

#[derive(Parser)]
#[command(name = "sim", version, about = "GPU cluster scheduling simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a workload from the config and simulate it.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate a recorded job trace under the config's cluster and policy.
    Replay {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Classify one job log against a signature rule file.
    Classify {
        #[arg(long)]
        rules: PathBuf,
        #[arg(long)]
        log: PathBuf,
    },
    /// Compare two report.json files metric by metric.
    Diff { report_a: PathBuf, report_b: PathBuf },
}

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error("{path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("SIM_LOG_LEVEL must be one of error, warn, info, debug (got {0:?})")]
    LogLevel(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Experiment(e) => e.exit_code() as u8,
            CliError::Config { .. } | CliError::Diff(_) | CliError::LogLevel(_) => 2,
            CliError::Io { .. } => 3,
        }
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn init_logging() -> Result<(), CliError> {
    let level = std::env::var("SIM_LOG_LEVEL").unwrap_or_else(|_| "warn".into());
    let filter = match level.as_str() {
        "error" => log::LevelFilter::Error,
        "warn" => log::LevelFilter::Warn,
        "info" => log::LevelFilter::Info,
        "debug" => log::LevelFilter::Debug,
        _ => return Err(CliError::LogLevel(level)),
    };
    env_logger::Builder::new().filter_level(filter).format_timestamp(None).init();
    Ok(())
}

fn summarize(run: &ExperimentRun, out: &Path) {
    let r = &run.report;
    println!("scenario {} seed {} jobs {}", r.scenario, r.seed, r.status.submitted);
    for (status, n) in &r.status.counts {
        let share = r.status.gpu_time_share.get(status).copied().unwrap_or(0.0);
        println!("  {:<13} {:>7} jobs  {:>6.2}% GPU time", status.as_str(), n, share);
    }
    println!("  non-passed GPU time {:.2}%", r.status.non_passed_gpu_time_share);
    println!("wrote {}", out.display());
}

fn execute(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Run { config, seed, out } => {
            let run = run_experiment(&config, Some(seed), None, &out)?;
            summarize(&run, &out);
        }
        Command::Replay { trace, config, out, seed } => {
            let run = run_experiment(&config, seed, Some(&trace), &out)?;
            summarize(&run, &out);
        }
        Command::Classify { rules, log } => {
            let text = read(&rules)?;
            let set = RuleSet::parse(&text).map_err(|e| CliError::Config {
                path: rules.clone(),
                message: e.to_string(),
            })?;
            let c = classify_log(&set, &read(&log)?);
            let json = serde_json::json!({
                "reason": c.reason.label(),
                "categories": c.categories.to_vec(),
                "rule_id": c.rule_id,
            });
            println!("{json}");
        }
        Command::Diff { report_a, report_b } => {
            let d = diff_reports(&read(&report_a)?, &read(&report_b)?)?;
            if !d.paired {
                println!("note: reports use different seeds; deltas are not paired");
            }
            if !d.same_config {
                println!("note: reports come from different configs");
            }
            let fmt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.6}"));
            println!("{:<60} {:>16} {:>16} {:>16}", "metric", "a", "b", "delta");
            for row in d.changed() {
                println!("{:<60} {:>16} {:>16} {:>+16}", row.metric, fmt(row.a), fmt(row.b), fmt(row.delta));
            }
            println!("{} of {} metrics differ", d.changed().count(), d.rows.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_logging().and_then(|()| execute(cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
