//! Named invariant checks with residuals, run by `gwbridge verify`.
//!
//! Each check compares a library computation with an independent reference
//! (closed form, exhaustive enumeration or Monte Carlo) and reports the
//! worst discrepancy it saw.

use std::f64::consts::PI;
use std::time::Instant;

use num_traits::ToPrimitive;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{run_case2_diagnostics, ExperimentConfig, ExperimentKind, Record, Result, RowSink};
use crate::bridge::bridge_dp_exact;
use crate::measure::{sandwich_constants, verify_sandwich};
use crate::offspring::OffspringDist;
use crate::oracles::{
    moment_bound_sweep, srw_return_by_enumeration, z_confinement_ln, z_first_return_pmf,
};
use crate::rng::{stream, Purpose};
use crate::tree::{all_rooted_trees, sample_gw, NodeId, Tree};
use crate::walk::{
    couple_to_line, distance, frontier_lower_bound, sample_path, spherical_escape, CouplingVariant,
    Kernel,
};

/// Sizes of the heavier checks; the defaults are the full acceptance sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteOptions {
    pub confinement_n: u64,
    pub confinement_x: u32,
    pub moment_max_vertices: usize,
    pub bridge_enum_max_vertices: usize,
    pub bridge_mc_paths: usize,
    pub coupling_trees: usize,
    pub coupling_paths: usize,
    pub sandwich_trees: usize,
    pub case2_grid: Vec<usize>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            confinement_n: 1_000_000,
            confinement_x: 251,
            moment_max_vertices: 7,
            bridge_enum_max_vertices: 10,
            bridge_mc_paths: 1_000_000,
            coupling_trees: 10,
            coupling_paths: 100_000,
            sandwich_trees: 20,
            case2_grid: vec![4, 6, 8],
        }
    }
}

impl SuiteOptions {
    /// Reduced sizes for quick smoke runs.
    pub fn quick() -> Self {
        SuiteOptions {
            confinement_n: 40_000,
            confinement_x: 50,
            moment_max_vertices: 5,
            bridge_enum_max_vertices: 7,
            bridge_mc_paths: 100_000,
            coupling_trees: 3,
            coupling_paths: 3_000,
            sandwich_trees: 4,
            case2_grid: vec![4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleCheck {
    pub name: &'static str,
    pub passed: bool,
    /// Worst discrepancy seen (check-specific units, 0 when exact).
    pub residual: f64,
    pub tolerance: f64,
    pub detail: String,
    pub millis: u64,
}

/// Runs every check and returns them in a fixed order.
pub fn run_oracle_suite_checks(opts: &SuiteOptions, seed: u64) -> Vec<OracleCheck> {
    type Check = fn(&SuiteOptions, u64) -> (bool, f64, f64, String);
    let checks: [(&'static str, Check); 11] = [
        ("confinement_constant", check_confinement),
        ("moment_bound_exhaustive", check_moment_bound),
        ("first_return_catalan", check_first_return),
        ("extinction_and_dual", check_extinction),
        ("escape_binary_cap30", check_escape),
        ("bridge_dp_vs_enumeration", check_bridge_enumeration),
        ("bridge_dp_vs_monte_carlo", check_bridge_monte_carlo),
        ("coupling_domination", check_couplings),
        ("change_of_measure", check_change_of_measure),
        ("case2_diagnostics", check_case2),
        ("spine_path_laws", check_spine),
    ];
    checks
        .iter()
        .map(|&(name, f)| {
            let t = Instant::now();
            let (passed, residual, tolerance, detail) = f(opts, seed);
            OracleCheck {
                name,
                passed,
                residual,
                tolerance,
                detail,
                millis: t.elapsed().as_millis() as u64,
            }
        })
        .collect()
}

/// The suite as CSV rows: one residual row per check, flagged `fail` on failure.
pub fn run_oracle_suite(cfg: &ExperimentConfig) -> Result<Vec<Record>> {
    let mut sink = RowSink::new(cfg, None, None);
    for c in run_oracle_suite_checks(&cfg.params.suite, cfg.master_seed) {
        sink.push("", c.name, c.residual, if c.passed { "" } else { "fail" });
    }
    Ok(sink.rows)
}

fn check_confinement(o: &SuiteOptions, _: u64) -> (bool, f64, f64, String) {
    let (n, x) = (o.confinement_n, o.confinement_x);
    let scaled = (x as f64).powi(2) / n as f64 * z_confinement_ln(n, x);
    let target = -PI * PI / 8.0;
    let rel = (scaled / target - 1.0).abs();
    (
        rel <= 0.08,
        rel,
        0.08,
        format!("(x^2/n) ln P = {scaled:.6} at n = {n}, x = {x}; limit {target:.6}"),
    )
}

fn check_moment_bound(o: &SuiteOptions, _: u64) -> (bool, f64, f64, String) {
    match moment_bound_sweep(o.moment_max_vertices, &[1, 2, 3]) {
        Ok(s) => {
            let bad = s.violations + s.single_violations;
            let trees = all_rooted_trees(o.moment_max_vertices).len();
            let expected = 3 * trees;
            let ok = bad == 0 && s.triples == expected;
            let detail = format!(
                "{} triples over {trees} trees (expected {expected}), {} single-leaf checks, min ln slack {:.4}",
                s.triples, s.single_checked, s.min_log_slack
            );
            (ok, bad as f64, 0.0, detail)
        }
        Err(e) => (false, f64::NAN, 0.0, e.to_string()),
    }
}

fn check_first_return(_: &SuiteOptions, _: u64) -> (bool, f64, f64, String) {
    // Entry k - 1 is P(first return at time 2k).
    let pmf = z_first_return_pmf(20);
    // Coefficient of x^{2k} in 1 - sqrt(1 - x^2) is Catalan(k-1) / 2^{2k-1}.
    let mut catalan = 1.0f64;
    let mut worst = 0.0f64;
    for k in 1..=20usize {
        if k > 1 {
            catalan *= 2.0 * (2 * k - 3) as f64 / k as f64;
        }
        let closed = catalan / 2f64.powi(2 * k as i32 - 1);
        worst = worst.max((pmf[k - 1] - closed).abs());
    }
    (
        worst <= 1e-12,
        worst,
        1e-12,
        "first-return pmf against Catalan numbers for k <= 20".into(),
    )
}

fn check_extinction(_: &SuiteOptions, _: u64) -> (bool, f64, f64, String) {
    let dist = OffspringDist::from_pairs(&[(0, 0.25), (2, 0.75)]).expect("valid law");
    let q_err = (dist.extinction_q() - 1.0 / 3.0).abs();
    let Ok(dual) = dist.dual() else {
        return (false, f64::NAN, 1e-10, "dual law unavailable".into());
    };
    let dual_ok = dual.mean() < 1.0;
    let gf = dist
        .extinct_size_gf(1.0, 0)
        .ok()
        .and_then(|g| g.radius_bound.zip(g.x_o));
    let Some((radius, x_o)) = gf else {
        return (false, q_err, 1e-10, "no size-GF witness".into());
    };
    let x = 0.99 * radius;
    let bounded = match dist.extinct_size_gf(x, 500) {
        Ok(g) => g.certified && g.value <= x_o,
        Err(_) => false,
    };
    let ok = q_err <= 1e-10 && dual_ok && bounded;
    (
        ok,
        q_err,
        1e-10,
        format!(
            "q error {q_err:.2e}, dual mean {:.4}, F_500(0.99 R) <= x_o = {x_o:.4}: {bounded}",
            dual.mean()
        ),
    )
}

fn check_escape(_: &SuiteOptions, _: u64) -> (bool, f64, f64, String) {
    let brackets = spherical_escape(&[2; 30], frontier_lower_bound(2), 1.0);
    let (lo, hi) = brackets[1];
    let width = hi - lo;
    let ok = width < 1e-6 && lo <= 1.0 / 6.0 + 1e-15 && hi >= 1.0 / 6.0 - 1e-15;
    (
        ok,
        width,
        1e-6,
        format!("bracket [{lo:.12}, {hi:.12}] around 1/6"),
    )
}

fn check_bridge_enumeration(o: &SuiteOptions, _: u64) -> (bool, f64, f64, String) {
    let mut compared = 0usize;
    let mut mismatches = 0usize;
    for shape in all_rooted_trees(o.bridge_enum_max_vertices) {
        let tree = shape.to_tree();
        if tree.deg(0) == 0 {
            continue;
        }
        for n in 1..=3usize {
            for limit in (1..=n as u32).map(Some).chain([None]) {
                let dp = bridge_dp_exact(&tree, n, limit).map(|(p, _)| p);
                let enumerated = srw_return_by_enumeration(&tree, n, limit);
                compared += 1;
                if !matches!((dp, enumerated), (Ok(a), Ok(b)) if a == b) {
                    mismatches += 1;
                }
            }
        }
    }
    (
        mismatches == 0,
        mismatches as f64,
        0.0,
        format!("{compared} (tree, n, L) cases compared in rationals"),
    )
}

/// A random recursive tree on `size` vertices.
fn recursive_tree<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Tree {
    let parents: Vec<Option<usize>> = (0..size)
        .map(|v| (v > 0).then(|| rng.random_range(0..v)))
        .collect();
    Tree::from_parents(&parents, None).expect("valid parent list")
}

fn check_bridge_monte_carlo(o: &SuiteOptions, seed: u64) -> (bool, f64, f64, String) {
    let mut rng = stream(seed, Purpose::Oracle, 1);
    let tree = recursive_tree(50, &mut rng);
    let n = 6;
    let exact = match bridge_dp_exact(&tree, n, None) {
        Ok((p, _)) => p.to_f64().unwrap_or(f64::NAN),
        Err(e) => return (false, f64::NAN, 3.0, e.to_string()),
    };
    let paths = o.bridge_mc_paths;
    let hits = (0..paths)
        .filter(|_| {
            sample_path(&tree, Kernel::Srw, 2 * n, &mut rng)
                .is_ok_and(|p| p.vertices[2 * n] == tree.root())
        })
        .count();
    let est = hits as f64 / paths as f64;
    let se = (exact * (1.0 - exact) / paths as f64).sqrt();
    let z = (est - exact).abs() / se;
    (
        z <= 3.0,
        z,
        3.0,
        format!("exact {exact:.6}, MC {est:.6} over {paths} paths on a 50-vertex tree"),
    )
}

fn check_couplings(o: &SuiteOptions, seed: u64) -> (bool, f64, f64, String) {
    // Leafless and thin, so walks never hit a leaf and trees stay small.
    let dist = OffspringDist::from_pairs(&[(1, 0.8), (2, 0.2)]).expect("valid law");
    let (steps, cap) = (40u32, 56u32);
    let per_tree = o.coupling_paths.div_ceil(o.coupling_trees.max(1));
    let mut rng = stream(seed, Purpose::Coupling, 0);
    let (mut checked, mut bad, mut errors) = (0usize, 0usize, 0usize);
    let mut trees = 0;
    while trees < o.coupling_trees {
        let Ok(tree) = sample_gw(&dist, cap, 1 << 22, &mut rng) else {
            continue;
        };
        // The watched subtree root must branch and leave room for the walk below the cap.
        let Some(v_o) = (0..tree.len() as NodeId)
            .find(|&v| tree.deg(v) >= 2 && tree.depth(v) + 2 + steps < cap)
        else {
            continue;
        };
        trees += 1;
        let v = tree.children(tree.children(v_o).start).start;
        for i in 0..per_tree {
            let variant = if i % 2 == 0 {
                CouplingVariant::FromRoot
            } else {
                CouplingVariant::FromVertex { v, v_o }
            };
            match couple_to_line(&tree, steps as usize, variant, &mut rng) {
                Ok(c) => {
                    checked += 1;
                    let dominated = c.line.iter().zip(&c.watched).all(|(&h, &w)| match variant {
                        CouplingVariant::FromRoot => h >= 0 && h <= tree.depth(w) as i64,
                        CouplingVariant::FromVertex { v, .. } => {
                            h.unsigned_abs() <= distance(&tree, w, v) as u64
                        }
                    });
                    bad += usize::from(!dominated);
                }
                Err(_) => errors += 1,
            }
        }
    }
    let ok = bad == 0 && errors == 0 && checked >= o.coupling_paths;
    (
        ok,
        bad as f64,
        0.0,
        format!("{checked} coupled paths over {trees} trees, {errors} errors"),
    )
}

/// A tree whose vertices above depth `n` have m or m + 1 children, capped at n + 1.
fn min_degree_tree<R: Rng + ?Sized>(m: u32, n: u32, rng: &mut R) -> Tree {
    let mut counts = vec![];
    let mut level = 1usize;
    for _ in 0..=n {
        let mut next = 0;
        for _ in 0..level {
            let k = m + rng.random_range(0..2);
            counts.push(k);
            next += k as usize;
        }
        level = next;
    }
    counts.extend(std::iter::repeat_n(0, level));
    Tree::from_child_counts(counts, Some(n + 1)).expect("valid counts")
}

fn check_change_of_measure(o: &SuiteOptions, seed: u64) -> (bool, f64, f64, String) {
    let mut rng = stream(seed, Purpose::Oracle, 2);
    let (mut instances, mut failed, mut worst, mut paths) = (0usize, 0usize, 0.0f64, 0usize);
    for i in 0..o.sandwich_trees {
        // Alternate m = 1 (small trees for every n <= 3) and m = 2 (trees grow as 2^n).
        let m = 1 + (i % 2) as u32;
        let depth = if m == 1 { 3 } else { 2 + (i / 2 % 2) as u32 };
        let tree = min_degree_tree(m, depth, &mut rng);
        let max_deg = (0..tree.len() as NodeId)
            .map(|v| tree.deg(v))
            .max()
            .unwrap_or(m);
        let Ok(k) = sandwich_constants(m, max_deg.max(m)) else {
            failed += 1;
            continue;
        };
        for n in 1..=depth.min(3) as usize {
            instances += 1;
            match verify_sandwich(&tree, n, &k, 1 << 22) {
                Ok(r) => {
                    paths += r.paths_checked;
                    worst = worst.max(r.identity_residual);
                    failed += usize::from(!r.passed());
                }
                Err(_) => failed += 1,
            }
        }
    }
    let ok = failed == 0 && worst <= 1e-12;
    (
        ok,
        worst,
        1e-12,
        format!("{instances} (tree, n) instances, {paths} returning paths, {failed} failures"),
    )
}

fn check_case2(o: &SuiteOptions, seed: u64) -> (bool, f64, f64, String) {
    let mut cfg = ExperimentConfig::standard(ExperimentKind::Case2Diagnostics);
    cfg.n_grid = o.case2_grid.clone();
    cfg.replicas = 1;
    cfg.master_seed = seed;
    cfg.workers = Some(1);
    cfg.params.brw_paths = 100;
    match run_case2_diagnostics(&cfg) {
        Ok(rows) => {
            let worst = rows
                .iter()
                .filter(|r| r.stat == "saturation_residual")
                .map(|r| r.value)
                .fold(0.0, f64::max);
            let diag: Vec<f64> = rows
                .iter()
                .filter(|r| r.stat == "diagnostic")
                .map(|r| r.value)
                .collect();
            let ok = !rows
                .iter()
                .any(|r| r.flag == "fail" || r.flag == "violation")
                && diag.len() == cfg.n_grid.len()
                && diag.iter().all(|d| d.is_finite() && *d < 0.0);
            (ok, worst, 1e-12, format!("diagnostics {diag:?}"))
        }
        Err(e) => (false, f64::NAN, 1e-12, e.to_string()),
    }
}

fn check_spine(_: &SuiteOptions, seed: u64) -> (bool, f64, f64, String) {
    use crate::tree::{sample_spine, SpineLaw};
    // For {1: 1/2, 2: 1/2} both spine vertices above level 2 have two children
    // with probability 1/4 under the uniform-child law and (1/1.5)^2 = 4/9
    // under the size-biased law.
    let dist = OffspringDist::from_pairs(&[(1, 0.5), (2, 0.5)]).expect("valid law");
    let mut rng = stream(seed, Purpose::Oracle, 3);
    let reps = 40_000;
    let mut worst = 0.0f64;
    let mut detail = String::new();
    for (law, expect) in [
        (SpineLaw::UniformChild, 0.25),
        (SpineLaw::SizeBiased, 4.0 / 9.0),
    ] {
        let mut hits = 0usize;
        for _ in 0..reps {
            if let Ok(s) = sample_spine(&dist, 2, 2, law, 1 << 16, &mut rng) {
                hits += usize::from(s.tree.deg(s.spine[0]) == 2 && s.tree.deg(s.spine[1]) == 2);
            }
        }
        let p = hits as f64 / reps as f64;
        let z = (p - expect).abs() / (expect * (1.0 - expect) / reps as f64).sqrt();
        worst = worst.max(z);
        detail.push_str(&format!("{law:?}: {p:.4} vs {expect:.4}; "));
    }
    (worst <= 4.0, worst, 4.0, detail)
}
