//! Max-displacement scaling of the SRW bridge on thin Galton-Watson trees.
//!
//! Each replica owns one tree stream. A cell (replica, n) grows the tree to
//! the cap needed by the largest n it can afford; because the sampler works
//! level by level, a smaller cap yields a prefix of the same tree, so every
//! cell of a replica sees the same tree up to its own depth.

use std::collections::BTreeMap;

use super::stats::{bootstrap_slope, mean, ols};
use super::{
    cube_root_limit, ExperimentConfig, ExperimentError, LGridPolicy, Record, Result, RowSink,
};
use crate::bridge::conditional_quantiles_seeded;
use crate::offspring::OffspringDist;
use crate::rng::{stream, Purpose};
use crate::tree::{sample_gw, sample_gw_survival, Tree, TreeError};

/// Default reference limit: L_ref = ceil(6 n^(1/3)).
pub const DEFAULT_L_FACTOR: f64 = 6.0;

/// L_ref for the `idx`-th grid point.
pub(crate) fn reference_limit(cfg: &ExperimentConfig, idx: usize) -> Result<u32> {
    let n = cfg.n_grid[idx];
    Ok(match &cfg.l_grid {
        LGridPolicy::Auto => cube_root_limit(n, DEFAULT_L_FACTOR),
        LGridPolicy::CubeRoot { factor } => cube_root_limit(n, *factor),
        LGridPolicy::Gamma { gamma } => ((n as f64).powf(*gamma).floor() as u32).max(1),
        LGridPolicy::Explicit { values } => *values
            .get(idx)
            .ok_or_else(|| ExperimentError::Config("explicit L grid shorter than n_grid".into()))?,
    })
}

/// Survival-conditioned tree when extinction is possible, plain otherwise.
pub(crate) fn sample_surviving(
    dist: &OffspringDist,
    cap: u32,
    max_nodes: usize,
    replica: usize,
    seed: u64,
) -> std::result::Result<Tree, TreeError> {
    let mut rng = stream(seed, Purpose::Tree, replica as u64);
    if dist.p_zero() > 0.0 {
        sample_gw_survival(dist, cap, max_nodes, max_nodes, &mut rng).map(|(t, _)| t)
    } else {
        sample_gw(dist, cap, max_nodes, &mut rng)
    }
}

fn stat_name(p: f64) -> String {
    if p == 0.5 {
        "median".into()
    } else {
        format!("q{p}")
    }
}

struct CellOut {
    rows: Vec<Record>,
    /// (ln n, ln median) when the cell is unflagged.
    point: Option<(f64, f64)>,
}

pub fn run_case1_scaling(cfg: &ExperimentConfig) -> Result<Vec<Record>> {
    cfg.validate()?;
    let dist = cfg.offspring();
    let limits: Vec<u32> = (0..cfg.n_grid.len())
        .map(|i| reference_limit(cfg, i))
        .collect::<Result<_>>()?;
    let caps: Vec<u32> = cfg
        .n_grid
        .iter()
        .zip(&limits)
        .map(|(&n, &l)| cfg.cap_for(n, |_| l + 1))
        .collect();
    if caps.iter().zip(&limits).any(|(c, l)| c <= l) {
        return Err(ExperimentError::Config(
            "depth cap must exceed L_ref".into(),
        ));
    }
    let mut probs = cfg.params.quantiles.clone();
    if !probs.contains(&0.5) {
        probs.push(0.5);
    }
    let cells = super::run_cells(cfg, |r, n| {
        let idx = cfg
            .n_grid
            .iter()
            .position(|&x| x == n)
            .expect("n from grid");
        case1_cell(cfg, &dist, &caps, limits[idx], idx, r, &probs)
    })?;

    let mut rows = Vec::new();
    let mut groups: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
    let mut per_n: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (cell, (r, n)) in cells
        .into_iter()
        .zip((0..cfg.replicas).flat_map(|r| cfg.n_grid.iter().map(move |&n| (r, n))))
    {
        let entry = per_n.entry(n).or_default();
        match cell.point {
            Some(p) => {
                groups.entry(r).or_default().push(p);
                entry.0.push(p.1.exp());
            }
            None => entry.1 += 1,
        }
        rows.extend(cell.rows);
    }
    for (idx, &n) in cfg.n_grid.iter().enumerate() {
        let (medians, excluded) = &per_n[&n];
        let mut sink = RowSink::new(cfg, None, Some(n));
        let mean_median = if medians.is_empty() {
            f64::NAN
        } else {
            mean(medians)
        };
        sink.push(limits[idx], "median_mean", mean_median, "");
        sink.push(
            limits[idx],
            "excluded_rate",
            *excluded as f64 / cfg.replicas as f64,
            "",
        );
        rows.extend(sink.rows);
    }
    let groups: Vec<Vec<(f64, f64)>> = groups.into_values().collect();
    let pooled: Vec<(f64, f64)> = groups.iter().flatten().copied().collect();
    let mut sink = RowSink::new(cfg, None, None);
    match ols(&pooled) {
        Some((slope, intercept)) => {
            let mut rng = stream(cfg.master_seed, Purpose::Bootstrap, 0);
            let (lo, hi) = bootstrap_slope(
                &groups,
                cfg.params.bootstrap_resamples,
                cfg.params.ci_level,
                &mut rng,
            )
            .unwrap_or((f64::NAN, f64::NAN));
            sink.push("", "slope", slope, "");
            sink.push("", "slope_ci_lo", lo, "");
            sink.push("", "slope_ci_hi", hi, "");
            sink.push("", "intercept", intercept, "");
        }
        None => sink.push("", "slope", f64::NAN, "fail"),
    }
    sink.push("", "cells_used", pooled.len() as f64, "");
    rows.extend(sink.rows);
    Ok(rows)
}

fn case1_cell(
    cfg: &ExperimentConfig,
    dist: &OffspringDist,
    caps: &[u32],
    l_ref: u32,
    idx: usize,
    r: usize,
    probs: &[f64],
) -> CellOut {
    let n = cfg.n_grid[idx];
    let mut sink = RowSink::new(cfg, Some(r), Some(n));
    // Largest affordable cap among the grid points at or beyond this one.
    let mut tree = None;
    for &cap in caps[idx..].iter().rev() {
        match sample_surviving(dist, cap, cfg.params.max_nodes, r, cfg.master_seed) {
            Ok(t) => {
                tree = Some(t);
                break;
            }
            Err(TreeError::NodeBudget(_)) => continue,
            Err(_) => {
                sink.push(l_ref, "median", f64::NAN, "fail");
                return CellOut {
                    rows: sink.rows,
                    point: None,
                };
            }
        }
    }
    let Some(tree) = tree else {
        sink.push(l_ref, "median", f64::NAN, "budget");
        return CellOut {
            rows: sink.rows,
            point: None,
        };
    };
    sink.push(l_ref, "tree_nodes", tree.len() as f64, "");
    let probe = ((0.8 * l_ref as f64).floor() as u32).max(1);
    let search = match conditional_quantiles_seeded(&tree, n, l_ref, probs, &[probe]) {
        Ok(s) => s,
        Err(_) => {
            sink.push(l_ref, "median", f64::NAN, "fail");
            return CellOut {
                rows: sink.rows,
                point: None,
            };
        }
    };
    let cdf_probe = match search.evaluated.get(&probe) {
        Some(&lp) => (lp - search.log_p_ref).exp(),
        None => match crate::bridge::log_joint_return(&tree, n, Some(probe)) {
            Ok(lp) => (lp - search.log_p_ref).exp(),
            Err(_) => f64::NAN,
        },
    };
    let flag = if cdf_probe >= cfg.params.saturation_min {
        ""
    } else {
        "unsaturated"
    };
    sink.push(l_ref, "log_p_joint_ref", search.log_p_ref, "");
    sink.push(probe, "cdf_at_0.8L", cdf_probe, flag);
    let mut median = f64::NAN;
    for (&p, &q) in probs.iter().zip(&search.quantiles) {
        sink.push(l_ref, &stat_name(p), q as f64, flag);
        if p == 0.5 {
            median = q as f64;
        }
    }
    let point = (flag.is_empty() && median > 0.0).then(|| ((n as f64).ln(), median.ln()));
    CellOut {
        rows: sink.rows,
        point,
    }
}
