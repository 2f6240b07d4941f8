//! Configured experiments: scaling studies, trend diagnostics and the
//! verification suite, all emitting rows of one fixed CSV schema.
//!
//! Work is split into (replica, n) cells that run on a rayon pool of a
//! configurable size. Each cell draws from its own RNG streams and returns
//! its rows; rows are then concatenated in cell order, so the output bytes
//! do not depend on the worker count or on scheduling.

mod case1;
mod case2;
mod excursions;
pub mod stats;
mod suite;
pub mod traps;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bridge::BridgeError;
use crate::measure::MeasureError;
use crate::offspring::{CaseTag, OffspringDist, OffspringError};
use crate::tree::TreeError;
use crate::walk::WalkError;

pub use case1::run_case1_scaling;
pub use case2::run_case2_diagnostics;
pub use excursions::run_excursion_rates;
pub use suite::{run_oracle_suite, run_oracle_suite_checks, OracleCheck, SuiteOptions};
pub use traps::run_trap_scaling;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Offspring(#[from] OffspringError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Bridge(#[from] BridgeError),
    #[error(transparent)]
    Walk(#[from] WalkError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("thread pool: {0}")]
    Pool(String),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExperimentKind {
    Case1Scaling,
    Case2Diagnostics,
    TrapScaling,
    ExcursionRates,
    OracleSuite,
}

impl ExperimentKind {
    /// File stem of the experiment's CSV and its `experiment` column value.
    pub fn slug(self) -> &'static str {
        match self {
            ExperimentKind::Case1Scaling => "case1_scaling",
            ExperimentKind::Case2Diagnostics => "case2_diagnostics",
            ExperimentKind::TrapScaling => "trap_scaling",
            ExperimentKind::ExcursionRates => "excursion_rates",
            ExperimentKind::OracleSuite => "oracle_suite",
        }
    }
}

/// How deep each sampled tree is grown.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case", deny_unknown_fields)]
pub enum DepthCapPolicy {
    /// The experiment's own rule (see each runner).
    #[default]
    Auto,
    Fixed {
        cap: u32,
    },
    /// `ceil(factor n^(1/3)) + 1`.
    CubeRoot {
        factor: f64,
    },
    /// `factor * n + offset`.
    Linear {
        factor: u32,
        offset: u32,
    },
}

/// Which displacement limits L are evaluated.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case", deny_unknown_fields)]
pub enum LGridPolicy {
    #[default]
    Auto,
    /// `L = ceil(factor n^(1/3))`.
    CubeRoot {
        factor: f64,
    },
    /// `L = floor(n^gamma)`.
    Gamma {
        gamma: f64,
    },
    Explicit {
        values: Vec<u32>,
    },
}

/// Tunables with defaults; each runner reads the ones it needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Params {
    pub max_nodes: usize,
    pub quantiles: Vec<f64>,
    pub bootstrap_resamples: usize,
    pub ci_level: f64,
    /// Conditional cdf at 0.8 L_ref below this flags the cell as unsaturated.
    pub saturation_min: f64,
    pub brw_paths: usize,
    /// Ancestor degree bounds for trap scaling; `null` means unbounded.
    pub k_values: Vec<Option<u32>>,
    /// Trap statistics at or beyond this length are censored.
    pub trap_horizon: Option<u32>,
    pub deltas: Vec<f64>,
    pub walks_per_tree: usize,
    /// Extra depth below the excursion window given to bushes.
    pub bush_margin: u32,
    /// Record real wall-clock times; off by default so output is reproducible.
    pub record_timing: bool,
    /// Oracle-suite knobs.
    pub suite: SuiteOptions,
}

impl Default for Params {
    fn default() -> Self {
        Params {
            max_nodes: 1 << 24,
            quantiles: vec![0.25, 0.5, 0.75],
            bootstrap_resamples: 200,
            ci_level: 0.95,
            saturation_min: 0.9,
            brw_paths: 2000,
            k_values: Vec::new(),
            trap_horizon: None,
            deltas: vec![0.1, 0.01],
            walks_per_tree: 200,
            bush_margin: 30,
            record_timing: false,
            suite: SuiteOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    /// Offspring law; each experiment has a default.
    #[serde(default)]
    pub offspring: Option<OffspringDist>,
    pub n_grid: Vec<usize>,
    pub replicas: usize,
    #[serde(default)]
    pub depth_cap: DepthCapPolicy,
    #[serde(default)]
    pub l_grid: LGridPolicy,
    pub master_seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub params: Params,
}

impl ExperimentConfig {
    /// The standard configuration of each experiment.
    pub fn standard(kind: ExperimentKind) -> Self {
        let pmf = |pairs: &[(u32, f64)]| {
            Some(OffspringDist::from_pairs(pairs).expect("valid default law"))
        };
        let (offspring, n_grid, replicas, l_grid) = match kind {
            ExperimentKind::Case1Scaling => (
                pmf(&[(1, 0.9), (2, 0.1)]),
                vec![512, 1024, 2048, 4096, 8192],
                20,
                LGridPolicy::CubeRoot { factor: 6.0 },
            ),
            ExperimentKind::Case2Diagnostics => (
                pmf(&[(2, 0.75), (3, 0.25)]),
                vec![2, 4, 6, 8],
                5,
                LGridPolicy::Gamma { gamma: 0.8 },
            ),
            ExperimentKind::TrapScaling => (
                pmf(&[(1, 0.5), (2, 0.5)]),
                vec![50, 100, 200],
                100,
                LGridPolicy::Auto,
            ),
            ExperimentKind::ExcursionRates => (
                pmf(&[(0, 0.2), (1, 0.3), (2, 0.5)]),
                vec![64, 128, 256, 512],
                20,
                LGridPolicy::Auto,
            ),
            ExperimentKind::OracleSuite => (None, vec![1], 1, LGridPolicy::Auto),
        };
        ExperimentConfig {
            experiment: kind,
            offspring,
            n_grid,
            replicas,
            depth_cap: DepthCapPolicy::Auto,
            l_grid,
            master_seed: 20_240_601,
            out_dir: None,
            workers: None,
            params: Params::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicas == 0 {
            return Err(ExperimentError::Config(
                "replicas must be at least 1".into(),
            ));
        }
        if self.n_grid.is_empty() || self.n_grid.contains(&0) {
            return Err(ExperimentError::Config(
                "n_grid must be nonempty and positive".into(),
            ));
        }
        if self.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ExperimentError::Config(
                "n_grid must be strictly ascending".into(),
            ));
        }
        if let Some(dist) = &self.offspring {
            let case = dist.case_tag();
            let ok = match self.experiment {
                ExperimentKind::Case1Scaling => matches!(case, CaseTag::Case1a | CaseTag::Case1b),
                ExperimentKind::Case2Diagnostics => case == CaseTag::Case2,
                ExperimentKind::ExcursionRates => case == CaseTag::Case1b,
                ExperimentKind::TrapScaling | ExperimentKind::OracleSuite => true,
            };
            if !ok {
                return Err(ExperimentError::Config(format!(
                    "{case:?} offspring law does not fit {:?}",
                    self.experiment
                )));
            }
            // The half-line law {1: 1} is critical but never dies, which is all the samplers need.
            if self.experiment != ExperimentKind::OracleSuite
                && !dist.is_supercritical()
                && dist.p(1) != 1.0
            {
                return Err(ExperimentError::Config(
                    "offspring law must survive with positive probability".into(),
                ));
            }
        }
        Ok(())
    }

    /// The configured offspring law or the experiment's default.
    pub fn offspring(&self) -> OffspringDist {
        self.offspring
            .clone()
            .or_else(|| Self::standard(self.experiment).offspring)
            .expect("every sampling experiment has a default law")
    }

    /// Depth cap for a cell at `n`, falling back to `auto(n)`.
    pub fn cap_for(&self, n: usize, auto: impl Fn(usize) -> u32) -> u32 {
        match &self.depth_cap {
            DepthCapPolicy::Auto => auto(n),
            DepthCapPolicy::Fixed { cap } => *cap,
            DepthCapPolicy::CubeRoot { factor } => cube_root_limit(n, *factor) + 1,
            DepthCapPolicy::Linear { factor, offset } => factor * n as u32 + offset,
        }
    }
}

/// `ceil(factor n^(1/3))`, with a tolerance so exact cubes are not rounded up.
pub fn cube_root_limit(n: usize, factor: f64) -> u32 {
    (factor * (n as f64).cbrt() - 1e-9).ceil().max(1.0) as u32
}

/// One output row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Record {
    pub experiment: &'static str,
    /// Empty on aggregate rows.
    pub replica: Option<usize>,
    pub n: Option<usize>,
    #[serde(rename = "k_or_L")]
    pub k_or_l: String,
    pub stat: String,
    pub value: f64,
    /// Empty, or one of: censored, contaminated, unsaturated, budget, no_eligible, violation, fail.
    pub flag: String,
    pub seed: u64,
    pub wall_ms: u64,
}

/// Builds the rows of one cell with shared identity columns.
pub(crate) struct RowSink {
    experiment: &'static str,
    replica: Option<usize>,
    n: Option<usize>,
    seed: u64,
    started: Option<Instant>,
    pub rows: Vec<Record>,
}

impl RowSink {
    pub(crate) fn new(cfg: &ExperimentConfig, replica: Option<usize>, n: Option<usize>) -> Self {
        RowSink {
            experiment: cfg.experiment.slug(),
            replica,
            n,
            seed: cfg.master_seed,
            started: cfg.params.record_timing.then(Instant::now),
            rows: Vec::new(),
        }
    }

    pub(crate) fn push(&mut self, k_or_l: impl ToString, stat: &str, value: f64, flag: &str) {
        let wall_ms = self.started.map_or(0, |t| t.elapsed().as_millis() as u64);
        self.rows.push(Record {
            experiment: self.experiment,
            replica: self.replica,
            n: self.n,
            k_or_l: k_or_l.to_string(),
            stat: stat.to_string(),
            value,
            flag: flag.to_string(),
            seed: self.seed,
            wall_ms,
        });
    }
}

/// Runs `cell` over every (replica, n) pair on `workers` threads and
/// returns the results in (replica, n) order.
pub(crate) fn run_cells<T, F>(cfg: &ExperimentConfig, cell: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, usize) -> T + Sync,
{
    let cells: Vec<(usize, usize)> = (0..cfg.replicas)
        .flat_map(|r| cfg.n_grid.iter().map(move |&n| (r, n)))
        .collect();
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = cfg.workers {
        builder = builder.num_threads(w.max(1));
    }
    let pool = builder
        .build()
        .map_err(|e| ExperimentError::Pool(e.to_string()))?;
    Ok(pool.install(|| cells.par_iter().map(|&(r, n)| cell(r, n)).collect()))
}

/// Rows of a finished run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub kind: ExperimentKind,
    pub records: Vec<Record>,
}

impl RunOutput {
    /// Rows whose flag marks a failed invariant.
    pub fn failures(&self) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(|r| r.flag == "fail")
    }

    /// The value of the first aggregate row named `stat`.
    pub fn aggregate(&self, stat: &str) -> Option<f64> {
        self.records
            .iter()
            .find(|r| r.replica.is_none() && r.stat == stat)
            .map(|r| r.value)
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let records = match cfg.experiment {
        ExperimentKind::Case1Scaling => run_case1_scaling(cfg)?,
        ExperimentKind::Case2Diagnostics => run_case2_diagnostics(cfg)?,
        ExperimentKind::TrapScaling => run_trap_scaling(cfg)?,
        ExperimentKind::ExcursionRates => run_excursion_rates(cfg)?,
        ExperimentKind::OracleSuite => run_oracle_suite(cfg)?,
    };
    Ok(RunOutput {
        kind: cfg.experiment,
        records,
    })
}

pub fn write_csv<W: std::io::Write>(records: &[Record], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    config: &'a ExperimentConfig,
    git_describe: String,
    crate_version: &'static str,
    rustc: String,
    csv: String,
    rows: usize,
}

/// Writes `<experiment>.csv` and `manifest.json` into `dir`; returns the CSV path.
pub fn write_outputs(dir: &Path, cfg: &ExperimentConfig, out: &RunOutput) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let csv_name = format!("{}.csv", out.kind.slug());
    let csv_path = dir.join(&csv_name);
    write_csv(
        &out.records,
        std::io::BufWriter::new(std::fs::File::create(&csv_path)?),
    )?;
    let manifest = Manifest {
        config: cfg,
        git_describe: command_line("git", &["describe", "--always", "--dirty"]),
        crate_version: env!("CARGO_PKG_VERSION"),
        rustc: command_line("rustc", &["--version"]),
        csv: csv_name,
        rows: out.records.len(),
    };
    let mut f = std::fs::File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    writeln!(f)?;
    Ok(csv_path)
}

fn command_line(cmd: &str, args: &[&str]) -> String {
    Command::new(cmd)
        .args(args)
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}
