//! Frequencies of rare backbone excursions on survival-conditioned trees.
//!
//! A walk is followed only while it can still produce an event: every event
//! at index i needs max_{j<i} |Y_j| <= delta n^(1/3), so once Y leaves the
//! widest window no later index can qualify. The tree therefore only needs
//! the window depth plus room for the bushes hanging inside it.

use std::collections::BTreeMap;

use super::stats::wilson;
use super::{ExperimentConfig, Record, Result, RowSink};
use crate::rng::{stream, Purpose};
use crate::tree::{sample_gw_survival, BackboneMarks, Tree};
use crate::walk::{backbone_observe, step_kernel, BackboneClock, Kernel, WalkPath};

const EVENTS: usize = 3;
/// Normal quantile for the reported intervals.
const Z95: f64 = 1.959_963_984_540_054;

/// Event counts of one walk for one delta.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EventCounts {
    /// Number of indices i <= floor(delta n) at which each event holds.
    pub count: [usize; EVENTS],
    /// Set when W(i) <= i failed somewhere.
    pub w_violation: bool,
}

/// Evaluates the three events for i = 1..=floor(delta n).
///
/// Returns `None` if the walk stopped before the events were decided.
pub fn excursion_events(
    tree: &Tree,
    marks: &BackboneMarks,
    path: &WalkPath,
    n: usize,
    delta: f64,
) -> Option<EventCounts> {
    let obs = backbone_observe(tree, marks, path, n, BackboneClock::EdgeSteps).ok()?;
    let nf = n as f64;
    let window = delta * nf.cbrt();
    let s_bar = delta.powf(1.0 / 6.0) * nf;
    let w_bar = nf.powf(2.0 / 3.0);
    let i_max = (delta * nf).floor() as usize;
    let mut out = EventCounts::default();
    out.w_violation = obs.w.iter().enumerate().any(|(i, &w)| w > i);
    let mut prefix_max = 0u32;
    for i in 1..=i_max {
        prefix_max = prefix_max.max(tree.depth(obs.y[i - 1]));
        if prefix_max as f64 > window {
            break;
        }
        let n_i = *obs.n_idx.get(i)?;
        let (s, w) = (obs.s[i], obs.w[i] as f64);
        let hits = [
            n_i > 2 * n && s < s_bar,
            w > w_bar,
            w <= w_bar && s >= s_bar,
        ];
        for (c, h) in out.count.iter_mut().zip(hits) {
            *c += usize::from(h);
        }
    }
    Some(out)
}

/// SRW from the root, stopped once Y has `target + 1` entries or a Y entry
/// lies deeper than `window`. `None` if it hit the cap or `max_steps`.
fn run_walk<R: rand::Rng + ?Sized>(
    tree: &Tree,
    marks: &BackboneMarks,
    target: usize,
    window: f64,
    max_steps: usize,
    rng: &mut R,
) -> Option<WalkPath> {
    let mut x = tree.root();
    let mut vertices = vec![x];
    let mut y_len = 1;
    while y_len <= target {
        if vertices.len() > max_steps {
            return None;
        }
        let next = step_kernel(tree, x, Kernel::Srw, rng).ok()?;
        if tree.is_frontier(next) {
            return None;
        }
        if marks.is_backbone(x) && marks.is_backbone(next) {
            y_len += 1;
            if tree.depth(next) as f64 > window {
                vertices.push(next);
                break;
            }
        }
        x = next;
        vertices.push(x);
    }
    Some(WalkPath::new(vertices, Kernel::Srw, tree))
}

/// Per (n, delta) tallies pooled over replicas.
#[derive(Debug, Default, Clone)]
struct Tally {
    walks: u64,
    excluded: u64,
    hit: [u64; EVENTS],
    count: [u64; EVENTS],
}

pub fn run_excursion_rates(cfg: &ExperimentConfig) -> Result<Vec<Record>> {
    cfg.validate()?;
    let dist = cfg.offspring();
    let deltas = cfg.params.deltas.clone();
    let d_max = deltas.iter().copied().fold(0.0, f64::max);
    let cells = super::run_cells(cfg, |r, n| -> (Vec<Record>, Vec<Tally>) {
        let mut sink = RowSink::new(cfg, Some(r), Some(n));
        let nf = n as f64;
        let window = d_max * nf.cbrt();
        let cap = cfg.cap_for(n, |_| window.floor() as u32 + 2 + cfg.params.bush_margin);
        let mut tree_rng = stream(
            cfg.master_seed,
            Purpose::Tree,
            ((r as u64) << 32) | n as u64,
        );
        let mut tallies = vec![Tally::default(); deltas.len()];
        let (tree, marks) = match sample_gw_survival(
            &dist,
            cap,
            cfg.params.max_nodes,
            cfg.params.max_nodes,
            &mut tree_rng,
        ) {
            Ok(t) => t,
            Err(_) => {
                sink.push("", "tree", f64::NAN, "budget");
                return (sink.rows, tallies);
            }
        };
        // A bush reaching the cap inside the window has a truncated size.
        let truncated = (0..=(window.floor() as u32 + 1).min(cap)).any(|d| {
            marks
                .bush_height
                .get(d as usize)
                .is_some_and(|&h| h > 0 && d + h >= cap)
        });
        let tree_flag = if truncated { "censored" } else { "" };
        let target = (d_max * nf).floor() as usize;
        let max_steps = 200 * n + 100_000;
        let mut rng = stream(
            cfg.master_seed,
            Purpose::Walk,
            ((r as u64) << 32) | n as u64,
        );
        for _ in 0..cfg.params.walks_per_tree {
            let path = run_walk(&tree, &marks, target, window, max_steps, &mut rng);
            for (t, &delta) in tallies.iter_mut().zip(&deltas) {
                t.walks += 1;
                match path
                    .as_ref()
                    .and_then(|p| excursion_events(&tree, &marks, p, n, delta))
                {
                    Some(ev) if !ev.w_violation && !truncated => {
                        for e in 0..EVENTS {
                            t.hit[e] += u64::from(ev.count[e] > 0);
                            t.count[e] += ev.count[e] as u64;
                        }
                    }
                    Some(ev) if ev.w_violation => {
                        sink.push(delta, "w_bound", f64::NAN, "fail");
                        t.excluded += 1;
                    }
                    _ => t.excluded += 1,
                }
            }
        }
        for (t, &delta) in tallies.iter().zip(&deltas) {
            let used = (t.walks - t.excluded).max(1) as f64;
            for e in 0..EVENTS {
                sink.push(
                    delta,
                    &format!("e{}_freq", e + 1),
                    t.hit[e] as f64 / used,
                    tree_flag,
                );
                sink.push(
                    delta,
                    &format!("e{}_mean_count", e + 1),
                    t.count[e] as f64 / used,
                    tree_flag,
                );
            }
            sink.push(
                delta,
                "excluded_rate",
                t.excluded as f64 / t.walks.max(1) as f64,
                tree_flag,
            );
        }
        (sink.rows, tallies)
    })?;

    let mut rows = Vec::new();
    let mut pooled: BTreeMap<(usize, usize), Tally> = BTreeMap::new();
    let order = (0..cfg.replicas).flat_map(|r| cfg.n_grid.iter().map(move |&n| (r, n)));
    for ((cell_rows, tallies), (_, n)) in cells.into_iter().zip(order) {
        rows.extend(cell_rows);
        for (d, t) in tallies.into_iter().enumerate() {
            let p = pooled.entry((d, n)).or_default();
            p.walks += t.walks;
            p.excluded += t.excluded;
            for e in 0..EVENTS {
                p.hit[e] += t.hit[e];
                p.count[e] += t.count[e];
            }
        }
    }
    for (d, &delta) in deltas.iter().enumerate() {
        let mut prev: Option<[(f64, f64); EVENTS]> = None;
        for &n in &cfg.n_grid {
            let t = &pooled[&(d, n)];
            let used = t.walks - t.excluded;
            let mut sink = RowSink::new(cfg, None, Some(n));
            let mut cur = [(0.0, 0.0); EVENTS];
            for e in 0..EVENTS {
                let p = if used == 0 {
                    f64::NAN
                } else {
                    t.hit[e] as f64 / used as f64
                };
                let (lo, hi) = wilson(t.hit[e], used, Z95);
                let se = if used == 0 {
                    0.0
                } else {
                    (p * (1.0 - p) / used as f64).sqrt()
                };
                cur[e] = (p, se);
                // Frequencies should not grow with n beyond two standard errors.
                let trend_ok =
                    prev.is_none_or(|pv| p <= pv[e].0 + 2.0 * (pv[e].1.powi(2) + se * se).sqrt());
                let flag = if trend_ok { "" } else { "violation" };
                sink.push(delta, &format!("e{}_freq", e + 1), p, flag);
                sink.push(delta, &format!("e{}_ci_lo", e + 1), lo, "");
                sink.push(delta, &format!("e{}_ci_hi", e + 1), hi, "");
                sink.push(
                    delta,
                    &format!("e{}_mean_count", e + 1),
                    t.count[e] as f64 / used.max(1) as f64,
                    "",
                );
            }
            sink.push(
                delta,
                "excluded_rate",
                t.excluded as f64 / t.walks.max(1) as f64,
                "",
            );
            prev = Some(cur);
            rows.extend(sink.rows);
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::{run_experiment, ExperimentKind};
    use crate::rng::seeded;
    use crate::tree::backbone_decompose;
    use crate::walk::sample_path;

    #[test]
    fn events_are_decided_on_a_bushless_tree() {
        // Complete binary tree: all backbone, r = 1/2 everywhere.
        let tree = Tree::complete(2, 12);
        let marks = backbone_decompose(&tree).unwrap();
        let mut rng = seeded(2);
        for _ in 0..200 {
            let path = sample_path(&tree, Kernel::Srw, 10, &mut rng).unwrap();
            let ev = excursion_events(&tree, &marks, &path, 1000, 0.01).unwrap();
            assert!(!ev.w_violation);
            // delta n^(1/3) = 0.1 keeps only i = 1; S(1) = 1/2 and W(1) = 1.
            assert_eq!(ev.count, [0, 0, 0]);
        }
    }

    #[test]
    fn run_produces_bounded_frequencies() {
        let mut cfg = ExperimentConfig::standard(ExperimentKind::ExcursionRates);
        cfg.n_grid = vec![64, 128];
        cfg.replicas = 3;
        cfg.params.walks_per_tree = 50;
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.failures().count(), 0);
        for r in out.records.iter().filter(|r| r.stat.ends_with("_freq")) {
            assert!((0.0..=1.0).contains(&r.value), "{r:?}");
        }
        let pooled = out
            .records
            .iter()
            .filter(|r| r.replica.is_none() && r.stat == "e1_ci_hi")
            .count();
        assert_eq!(pooled, 4);
    }
}
