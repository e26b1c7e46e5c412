use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mfg_fluct::experiments::{run_with_threads, ExperimentConfig};
use mfg_fluct::model_lq::{ModelParams, Population, RiccatiCurve};
use mfg_fluct::Result;

/// Monte Carlo experiments for fluctuations of LQ mean field games.
#[derive(Parser)]
#[command(name = "mfg-fluct", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config and write its CSV and JSON report.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `base_seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads; defaults to all cores.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Parse and validate a config without running it.
    ValidateConfig { path: PathBuf },
    /// Print the Riccati solution φ on [0, T] as CSV.
    Riccati {
        /// Population size, or `inf` for the mean field limit.
        #[arg(long)]
        n: Population,
        /// JSON file with the model parameters.
        #[arg(long)]
        params: PathBuf,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
    },
}

const EXIT_STATISTICAL_FAILURE: u8 = 2;

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run {
            config,
            seed,
            out,
            threads,
        } => {
            let mut cfg = ExperimentConfig::from_path(&config)?;
            if let Some(s) = seed {
                cfg.base_seed = s;
            }
            if let Some(dir) = out {
                cfg.output_dir = dir;
            }
            let outcome = run_with_threads(&cfg, threads)?;
            for path in outcome.write_to(&cfg.output_dir)? {
                println!("wrote {}", path.display());
            }
            let verdict = if outcome.pass() { "PASS" } else { "FAIL" };
            println!("{} {verdict}", cfg.experiment.name());
            Ok(if outcome.pass() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_STATISTICAL_FAILURE)
            })
        }
        Command::ValidateConfig { path } => {
            let cfg = ExperimentConfig::from_path(&path)?;
            println!("ok: {} (hash {})", cfg.experiment.name(), &cfg.hash()[..16]);
            Ok(ExitCode::SUCCESS)
        }
        Command::Riccati { n, params, steps } => {
            let p: ModelParams = serde_json::from_str(&std::fs::read_to_string(&params)?)?;
            let curve = RiccatiCurve::closed_form(n, &p, steps)?;
            curve.write_csv(std::io::stdout().lock())?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
