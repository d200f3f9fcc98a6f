//! Command-line front end for the experiment suites.
//!
//! Each subcommand reads a plain-text `key = value` configuration file,
//! applies the flag overrides, runs one experiment, and prints the gate
//! outcomes. The process exits non-zero when a gate fails or the run
//! errors, so the suites compose with shell scripts and CI.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use maskbf::error::Result;
use maskbf::experiment::{run_exp1, run_exp2, run_exp3, ExperimentConfig, ExperimentReport};

#[derive(Parser)]
#[command(
    name = "maskbf",
    version,
    about = "Mask-driven beamformer laboratory",
    long_about = "Runs the three experiment suites: exp1 optimizes time-frequency masks \
                  per beamformer and scores them against the ideal Wiener baseline, exp2 \
                  transplants the optimized masks across beamformers, exp3 scores the \
                  classic oracle masks inside every beamformer."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize masks per method and compare with the ideal Wiener filter.
    Exp1(RunArgs),
    /// Transplant exp1's optimized masks across methods.
    Exp2(RunArgs),
    /// Score oracle masks (ratio and magnitude-ratio) inside each method.
    Exp3(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Plain-text configuration file (`key = value` lines, `#` comments).
    #[arg(long)]
    config: PathBuf,

    /// Directory that receives results, tables, masks and traces.
    #[arg(long)]
    out: PathBuf,

    /// Root directory of a clean/noise stem dataset; only consulted when
    /// the configuration selects the dataset source.
    #[arg(long, env = "MASKBF_DATASET_ROOT")]
    dataset_root: Option<PathBuf>,

    /// Override the configured base seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Override the gradient mode: `analytic` or `fd`.
    #[arg(long)]
    gradient: Option<String>,

    /// Override the per-bin iteration budget.
    #[arg(long)]
    iters: Option<usize>,
}

impl RunArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::from_file(&self.config)?;
        cfg.out_dir = self.out.clone();
        if let Some(root) = &self.dataset_root {
            cfg.dataset_root = Some(root.clone());
        }
        if let Some(seed) = self.seed {
            cfg.apply_kv("seed", &seed.to_string())?;
        }
        if let Some(gradient) = &self.gradient {
            cfg.apply_kv("gradient", gradient)?;
        }
        if let Some(iters) = self.iters {
            cfg.apply_kv("iterations", &iters.to_string())?;
        }
        Ok(cfg)
    }
}

fn print_report(report: &ExperimentReport) {
    println!(
        "{}: {} rows -> {}",
        report.experiment,
        report.rows.len(),
        report.dir.display()
    );
    for gate in &report.gates {
        println!(
            "[{}] {}: {}",
            if gate.passed { "PASS" } else { "FAIL" },
            gate.name,
            gate.detail
        );
    }
    for line in &report.info {
        println!("[INFO] {line}");
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (args, runner): (&RunArgs, fn(&ExperimentConfig) -> Result<ExperimentReport>) =
        match &cli.command {
            Command::Exp1(args) => (args, run_exp1),
            Command::Exp2(args) => (args, run_exp2),
            Command::Exp3(args) => (args, run_exp3),
        };
    let cfg = match args.resolve() {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match runner(&cfg) {
        Ok(report) => {
            print_report(&report);
            if report.all_passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
