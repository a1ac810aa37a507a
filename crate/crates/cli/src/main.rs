use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use damel::experiment::{self, ExperimentConfig};

/// Train, sweep and ablate multi-expert long-tail classifiers.
#[derive(Parser)]
#[command(name = "damel", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one configuration.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// One run per seed, then the bias/variance decomposition.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated seeds, e.g. 0,1,2
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Run a named ablation suite over the configured seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        suite: String,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Re-aggregate run records under a directory into report.csv.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn load(path: &PathBuf) -> damel::Result<ExperimentConfig> {
    ExperimentConfig::load(path)
}

fn name(command: &Command) -> &'static str {
    match command {
        Command::Run { .. } => "run",
        Command::Sweep { .. } => "sweep",
        Command::Ablate { .. } => "ablate",
        Command::Report { .. } => "report",
    }
}

fn execute(command: Command) -> damel::Result<String> {
    match command {
        Command::Run { config, seed } => {
            let rec = experiment::run_single(&load(&config)?, seed)?;
            Ok(serde_json::to_string_pretty(&serde_json::json!({
                "config_hash": rec.config_hash,
                "seed": rec.seed,
                "overall_acc": rec.eval.overall_acc,
                "group_acc": rec.eval.group_acc,
                "raw_overall_acc": rec.raw_eval.overall_acc,
                "checkpoint": rec.checkpoint_path,
            }))?)
        }
        Command::Sweep {
            config,
            seeds,
            workers,
        } => {
            let out = experiment::run_seed_sweep(&load(&config)?, &seeds, workers)?;
            Ok(format!(
                "{}\nsummary written to {}",
                serde_json::to_string_pretty(&out.summary)?,
                out.summary_path.display()
            ))
        }
        Command::Ablate {
            config,
            suite,
            workers,
        } => {
            let cfg = load(&config)?;
            experiment::expand_suite(&cfg.setup(), &suite)?;
            let out = experiment::run_ablation_suite(&cfg, &suite, workers)?;
            Ok(format!(
                "{}comparison written to {}",
                experiment::comparison_csv(&out.rows)?,
                out.csv_path.display()
            ))
        }
        Command::Report { dir } => {
            let (rows, path) = experiment::report(&dir)?;
            Ok(format!(
                "{}report written to {}",
                experiment::comparison_csv(&rows)?,
                path.display()
            ))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let _ = err.print();
            return ExitCode::from(if err.use_stderr() { 1 } else { 0 });
        }
    };
    let name = name(&cli.command);
    match execute(cli.command).with_context(|| format!("{name} failed")) {
        Ok(text) => {
            println!("{text}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            let config_error = err
                .downcast_ref::<damel::Error>()
                .is_some_and(damel::Error::is_config);
            ExitCode::from(if config_error { 1 } else { 2 })
        }
    }
}
