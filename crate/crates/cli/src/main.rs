//! `gwbridge`: runs configured experiments and the verification suite.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gwbridge_core::experiments::{
    run_experiment, run_oracle_suite_checks, write_outputs, ExperimentConfig, ExperimentKind,
    SuiteOptions,
};

#[derive(Parser, Debug)]
#[command(
    name = "gwbridge",
    version,
    about = "Walks and bridges on Galton-Watson trees"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one experiment from a JSON config and write its CSV and manifest.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; falls back to the config's `out_dir`, then `out/`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Run the oracle checks and print one line per check.
    Verify {
        /// Smaller sample sizes for a smoke run.
        #[arg(long)]
        quick: bool,
        #[arg(long, default_value_t = 20_240_601)]
        seed: u64,
    },
    /// Print the standard config of an experiment as JSON.
    Config {
        /// One of case1_scaling, case2_diagnostics, trap_scaling, excursion_rates, oracle_suite.
        experiment: String,
    },
}

fn parse_kind(slug: &str) -> Option<ExperimentKind> {
    [
        ExperimentKind::Case1Scaling,
        ExperimentKind::Case2Diagnostics,
        ExperimentKind::TrapScaling,
        ExperimentKind::ExcursionRates,
        ExperimentKind::OracleSuite,
    ]
    .into_iter()
    .find(|k| k.slug() == slug)
}

fn run(
    config: PathBuf,
    out: Option<PathBuf>,
    seed: Option<u64>,
    workers: Option<usize>,
) -> Result<ExitCode, String> {
    let text =
        std::fs::read_to_string(&config).map_err(|e| format!("{}: {e}", config.display()))?;
    let mut cfg = ExperimentConfig::from_json(&text).map_err(|e| e.to_string())?;
    if let Some(s) = seed {
        cfg.master_seed = s;
    }
    if workers.is_some() {
        cfg.workers = workers;
    }
    let dir = out
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let output = run_experiment(&cfg).map_err(|e| e.to_string())?;
    let csv = write_outputs(&dir, &cfg, &output).map_err(|e| e.to_string())?;
    let failures: Vec<_> = output.failures().collect();
    println!("wrote {} rows to {}", output.records.len(), csv.display());
    for f in &failures {
        eprintln!(
            "fail: n={:?} replica={:?} {} {} = {}",
            f.n, f.replica, f.k_or_l, f.stat, f.value
        );
    }
    Ok(if failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn verify(quick: bool, seed: u64) -> ExitCode {
    let opts = if quick {
        SuiteOptions::quick()
    } else {
        SuiteOptions::default()
    };
    let checks = run_oracle_suite_checks(&opts, seed);
    for c in &checks {
        println!(
            "{} {:<26} residual={:.3e} tol={:.1e} {}ms {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.residual,
            c.tolerance,
            c.millis,
            c.detail
        );
    }
    if checks.iter().all(|c| c.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            out,
            seed,
            workers,
        } => run(config, out, seed, workers),
        Command::Verify { quick, seed } => Ok(verify(quick, seed)),
        Command::Config { experiment } => match parse_kind(&experiment) {
            Some(kind) => serde_json::to_string_pretty(&ExperimentConfig::standard(kind))
                .map(|s| {
                    println!("{s}");
                    ExitCode::SUCCESS
                })
                .map_err(|e| e.to_string()),
            None => Err(format!("unknown experiment `{experiment}`")),
        },
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        ExitCode::from(2)
    })
}
