use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use patsim_core::config::{ExactValue, ExperimentConfig};
use patsim_core::experiment::{report, run_experiment};
use patsim_core::schedulers::StrategyId;
use patsim_core::time::parse_exact;
use patsim_core::verifier::{verify_batches, verify_periodic, VerificationReport};
use patsim_core::workloads::WorkloadKind;

const DEFAULT_OUT: &str = "patsim-out";

#[derive(Parser)]
#[command(name = "patsim", version, about = "Patience-aware scheduling simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file with flat dotted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, env = "PATSIM_OUT", default_value = DEFAULT_OUT)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Run the strategy × workload × resources matrix over the daily workloads.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated strategies (fifo, pas, eas).
        #[arg(long, value_delimiter = ',')]
        strategy: Vec<StrategyId>,
        /// Comma-separated workloads (flat, normal, peaky).
        #[arg(long, value_delimiter = ',')]
        workload: Vec<WorkloadKind>,
        /// Comma-separated server counts.
        #[arg(long, value_delimiter = ',')]
        resources: Vec<usize>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',')]
        seed: Vec<u64>,
        /// Worker threads.
        #[arg(long)]
        workers: Option<usize>,
        /// Skip the per-request CSV files.
        #[arg(long)]
        summary_only: bool,
    },
    /// Check a scheduling proposition on its constructed instances.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        proposition: u8,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long, value_parser = parse_exact_arg)]
        delta: Option<ExactValue>,
        #[arg(long, value_parser = parse_exact_arg)]
        epsilon: Option<ExactValue>,
        #[arg(long)]
        b: Option<usize>,
        /// Random batches for proposition 1.
        #[arg(long, default_value_t = 200)]
        instances: usize,
        /// Seed for proposition 1 batches (defaults to `rng_seed`).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Rebuild the summary and histograms from per-request CSVs.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        /// Patience cutoff; defaults to the value echoed in the CSVs.
        #[arg(long)]
        cutoff: Option<f64>,
    },
}

fn parse_exact_arg(s: &str) -> Result<ExactValue, String> {
    parse_exact(s).map(ExactValue).ok_or_else(|| format!("`{s}` is not an exact number"))
}

fn load(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => Ok(ExperimentConfig::load(p)?),
        None => Ok(ExperimentConfig::default()),
    }
}

fn write_report(out: &Path, report: &VerificationReport) -> Result<PathBuf> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join(format!("verify_prop{}.json", report.proposition));
    let json = serde_json::to_string_pretty(report)?;
    std::fs::write(&path, json + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Simulate { common, strategy, workload, resources, seed, workers, summary_only } => {
            let mut config = load(common.config.as_deref())?;
            let m = &mut config.matrix;
            if !strategy.is_empty() {
                m.strategies = strategy;
            }
            if !workload.is_empty() {
                m.workloads = workload;
            }
            if !resources.is_empty() {
                m.resources = resources;
            }
            if !seed.is_empty() {
                m.seeds = seed;
            }
            if let Some(w) = workers {
                m.workers = w;
            }
            if summary_only {
                m.write_requests = false;
            }
            config.validate()?;
            let started = Instant::now();
            let output = run_experiment(&config, Some(&common.out))?;
            println!(
                "{} cells in {:.1}s, results in {}",
                output.cells,
                started.elapsed().as_secs_f64(),
                common.out.display()
            );
            println!("cutoff for patience → 0: {}", config.sim.patience_zero_cutoff);
            println!("{:<7} {:<5} {:>3} {:>9} {:>10} {:>10}", "workload", "strat", "r", "requests", "mean<1", "pct→0");
            for r in &output.summary {
                println!(
                    "{:<7} {:<5} {:>3} {:>9} {:>10} {:>10.4}",
                    r.workload.as_str(),
                    r.strategy.as_str(),
                    r.resources,
                    r.requests,
                    r.mean_patience_sub_one.map_or("-".into(), |v| format!("{v:.4}")),
                    r.pct_patience_to_zero
                );
            }
            Ok(true)
        }
        Command::Verify { common, proposition, m, delta, epsilon, b, instances, seed } => {
            let mut config = load(common.config.as_deref())?;
            let report = if proposition == 1 {
                verify_batches(instances, 8, seed.unwrap_or(config.sim.rng_seed))?
            } else {
                let f = &mut config.family_f;
                f.proposition = proposition;
                if let Some(v) = m {
                    f.m = v;
                }
                if let Some(v) = delta {
                    f.delta = v;
                }
                if let Some(v) = epsilon {
                    f.epsilon = v;
                }
                if let Some(v) = b {
                    f.b = v;
                }
                let prop = f.proposition()?;
                verify_periodic(&f.params(), prop)?
            };
            print!("{}", report.render());
            println!("config {}", config.echo());
            let path = write_report(&common.out, &report)?;
            println!("wrote {}", path.display());
            Ok(report.passed)
        }
        Command::Report { common, bins, cutoff } => {
            if bins == 0 {
                bail!("--bins must be at least 1");
            }
            let output = report(&common.out, bins, cutoff)?;
            println!(
                "re-aggregated {} request files into {} summary records under {}",
                output.cells,
                output.summary.len(),
                common.out.display()
            );
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
