//! Exact small-n diagnostics for laws with at least two children per vertex.
//!
//! Per cell the tree is grown to depth 2n + 1, which holds every vertex a
//! 2n-step walk can reach, so all probabilities below are exact up to
//! floating point.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use super::stats::{mean, variance};
use super::{ExperimentConfig, ExperimentError, LGridPolicy, Record, Result, RowSink};
use crate::bridge::{log_joint_return, return_prob};
use crate::measure::{b_count, sandwich_constants, weighted_brw_return};
use crate::rng::{stream, Purpose};
use crate::tree::sample_gw;
use crate::walk::{sample_path, Kernel};

pub const DEFAULT_GAMMA: f64 = 0.8;
/// Allowed gap between the L = 2n column and the unconstrained return probability.
pub const SATURATION_TOL: f64 = 1e-12;
/// Slack below zero tolerated before a sandwich side counts as violated.
const SANDWICH_TOL: f64 = 1e-9;

fn gamma(cfg: &ExperimentConfig) -> Result<f64> {
    match &cfg.l_grid {
        LGridPolicy::Auto => Ok(DEFAULT_GAMMA),
        LGridPolicy::Gamma { gamma } if *gamma > 0.0 => Ok(*gamma),
        other => Err(ExperimentError::Config(format!(
            "Case-2 diagnostics need a gamma L grid, got {other:?}"
        ))),
    }
}

pub fn run_case2_diagnostics(cfg: &ExperimentConfig) -> Result<Vec<Record>> {
    cfg.validate()?;
    let dist = cfg.offspring();
    let gamma = gamma(cfg)?;
    let m = dist.min_support();
    let k = sandwich_constants(m, dist.max_support())?;
    let big_m = k.big_m_f64();
    let (c1, c2) = (k.c1_f64(), k.c2_f64());
    let reference = -(PI * (m as f64).ln()).powi(2) / (gamma * gamma);

    let cells = super::run_cells(cfg, |r, n| -> Vec<Record> {
        let mut sink = RowSink::new(cfg, Some(r), Some(n));
        let l = ((n as f64).powf(gamma).floor() as u32).max(1);
        let cap = cfg.cap_for(n, |n| 2 * n as u32 + 1);
        let mut rng = stream(cfg.master_seed, Purpose::Tree, r as u64);
        let tree = match sample_gw(&dist, cap, cfg.params.max_nodes, &mut rng) {
            Ok(t) => t,
            Err(_) => {
                sink.push(l, "diagnostic", f64::NAN, "budget");
                return sink.rows;
            }
        };
        if cap <= 2 * n as u32 {
            sink.push(l, "diagnostic", f64::NAN, "fail");
            return sink.rows;
        }
        let nf = n as f64;
        let cell = (|| -> Result<()> {
            let log_joint = log_joint_return(&tree, n, Some(l))?;
            let diag = nf.ln().powi(2) / nf * (log_joint - nf * big_m.ln());
            let flag = if diag.is_finite() && diag < 0.0 {
                ""
            } else {
                "fail"
            };
            sink.push(l, "log_p_joint", log_joint, "");
            sink.push(l, "diagnostic", diag, flag);

            let (p_ret, log_ret) = return_prob(&tree, n)?;
            let log_full = log_joint_return(&tree, n, Some(2 * n as u32))?;
            let residual = (log_full.exp() - p_ret).abs();
            sink.push(n, "log_p_return", log_ret, "");
            let flag = if residual <= SATURATION_TOL {
                ""
            } else {
                "fail"
            };
            sink.push(2 * n, "log_p_joint", log_full, flag);
            sink.push(2 * n, "saturation_residual", residual, flag);

            let lower = weighted_brw_return(&tree, n, m, c1, Some(l))?;
            let upper = weighted_brw_return(&tree, n, m, c2, Some(l))?;
            let slack_lo = log_joint - lower.ln();
            let slack_hi = upper.ln() - log_joint;
            sink.push(
                l,
                "sandwich_lower_slack",
                slack_lo,
                if slack_lo >= -SANDWICH_TOL {
                    ""
                } else {
                    "violation"
                },
            );
            sink.push(
                l,
                "sandwich_upper_slack",
                slack_hi,
                if slack_hi >= -SANDWICH_TOL {
                    ""
                } else {
                    "violation"
                },
            );

            let mut walk_rng = stream(cfg.master_seed, Purpose::Walk, r as u64);
            let mut b = Vec::with_capacity(cfg.params.brw_paths);
            for _ in 0..cfg.params.brw_paths {
                let path = sample_path(&tree, Kernel::Brw { m }, 2 * n, &mut walk_rng)?;
                b.push(b_count(&tree, &path.vertices, m) as f64);
            }
            if !b.is_empty() {
                sink.push(2 * n, "b_n_mean", mean(&b), "");
                sink.push(2 * n, "b_n_var", variance(&b), "");
            }
            Ok(())
        })();
        if cell.is_err() {
            sink.push(l, "diagnostic", f64::NAN, "fail");
        }
        sink.rows
    })?;

    let mut rows: Vec<Record> = cells.into_iter().flatten().collect();
    let mut diag: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in rows
        .iter()
        .filter(|r| r.stat == "diagnostic" && r.flag.is_empty())
    {
        diag.entry(r.n.expect("cell row"))
            .or_default()
            .push(r.value);
    }
    let mut sink = RowSink::new(cfg, None, None);
    sink.push("", "reference_rate", reference, "");
    sink.push("", "big_m", big_m, "");
    rows.extend(sink.rows);
    for &n in &cfg.n_grid {
        let mut sink = RowSink::new(cfg, None, Some(n));
        let l = ((n as f64).powf(gamma).floor() as u32).max(1);
        let vals = diag.get(&n).map(Vec::as_slice).unwrap_or(&[]);
        let v = if vals.is_empty() {
            f64::NAN
        } else {
            mean(vals)
        };
        sink.push(l, "diagnostic_mean", v, "");
        sink.push(
            l,
            "excluded_rate",
            1.0 - vals.len() as f64 / cfg.replicas as f64,
            "",
        );
        rows.extend(sink.rows);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::{run_experiment, ExperimentKind};

    #[test]
    fn diagnostics_are_finite_negative_and_saturated() {
        let mut cfg = ExperimentConfig::standard(ExperimentKind::Case2Diagnostics);
        cfg.n_grid = vec![2, 4];
        cfg.replicas = 2;
        cfg.params.brw_paths = 200;
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.failures().count(), 0);
        let diags: Vec<_> = out
            .records
            .iter()
            .filter(|r| r.stat == "diagnostic")
            .collect();
        assert_eq!(diags.len(), 4);
        assert!(diags.iter().all(|r| r.value.is_finite() && r.value < 0.0));
        assert!(out
            .records
            .iter()
            .filter(|r| r.stat.starts_with("sandwich"))
            .all(|r| r.flag.is_empty()));
    }

    #[test]
    fn binary_tree_uses_m_of_eight_ninths() {
        let mut cfg = ExperimentConfig::standard(ExperimentKind::Case2Diagnostics);
        cfg.offspring = Some(crate::offspring::OffspringDist::from_pairs(&[(2, 1.0)]).unwrap());
        cfg.n_grid = vec![3];
        cfg.replicas = 1;
        cfg.params.brw_paths = 10;
        let out = run_experiment(&cfg).unwrap();
        assert!((out.aggregate("big_m").unwrap() - 8.0 / 9.0).abs() < 1e-15);
        let b = out
            .records
            .iter()
            .find(|r| r.stat == "b_n_mean")
            .unwrap()
            .value;
        // On a complete binary tree only root visits count.
        assert!(b >= 1.0);
    }
}
