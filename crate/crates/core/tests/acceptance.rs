//! Acceptance run: one PASS/FAIL line per criterion, exit status 1 on any failure.
//!
//! Reference values are recomputed here from closed forms or by an
//! enumerator that shares no code with the library.

use std::f64::consts::PI;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use gwbridge_core::bridge::bridge_dp_exact;
use gwbridge_core::exact::Q;
use gwbridge_core::experiments::{
    run_experiment, run_oracle_suite_checks, ExperimentConfig, ExperimentKind, OracleCheck,
    SuiteOptions,
};
use gwbridge_core::measure::{sandwich_constants, verify_sandwich};
use gwbridge_core::offspring::OffspringDist;
use gwbridge_core::oracles::{moment_bound_sweep, z_confinement_ln, z_first_return_pmf};
use gwbridge_core::rng::{stream, Purpose};
use gwbridge_core::tree::{all_rooted_trees, sample_gw, NodeId, Tree};
use gwbridge_core::walk::{frontier_lower_bound, spherical_escape};
use num_traits::{One, Zero};
use rand::Rng;

const SEED: u64 = 20_240_601;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn within(t: Duration, limit_s: u64) -> bool {
    t <= Duration::from_secs(limit_s)
}

fn confinement() -> Outcome {
    let t = Instant::now();
    let (n, x) = (1_000_000u64, 251u32);
    let scaled = f64::from(x).powi(2) / n as f64 * z_confinement_ln(n, x);
    let limit = -PI * PI / 8.0;
    let rel = (scaled / limit - 1.0).abs();
    let el = t.elapsed();
    outcome(
        rel <= 0.08 && within(el, 60),
        format!("(x^2/n) ln P = {scaled:.5} vs {limit:.5}, rel {rel:.4} <= 0.08, {el:.1?}"),
    )
}

/// Rooted unlabeled trees with exactly k vertices for k = 1..=7.
const ROOTED_TREE_COUNTS: [usize; 7] = [1, 1, 2, 4, 9, 20, 48];

fn moment_bound() -> Outcome {
    let t = Instant::now();
    let trees: usize = ROOTED_TREE_COUNTS.iter().sum();
    match moment_bound_sweep(7, &[1, 2, 3]) {
        Ok(s) => {
            let el = t.elapsed();
            let ok = s.triples == 3 * trees
                && s.violations == 0
                && s.single_violations == 0
                && within(el, 60);
            outcome(
                ok,
                format!(
                    "{} triples (expected {}), {} violations, {} single-leaf checks with {} violations, {el:.1?}",
                    s.triples,
                    3 * trees,
                    s.violations,
                    s.single_checked,
                    s.single_violations
                ),
            )
        }
        Err(e) => outcome(false, e.to_string()),
    }
}

/// Child counts in BFS order for a tree where every vertex above depth `n + 1`
/// has m or m + 1 children; `None` if it would exceed `max_vertices`.
fn min_degree_counts<R: Rng>(m: u32, n: u32, max_vertices: usize, rng: &mut R) -> Option<Vec<u32>> {
    let mut counts = Vec::new();
    let mut level = 1usize;
    let mut total = 1usize;
    for _ in 0..=n {
        let mut next = 0;
        for _ in 0..level {
            let k = m + rng.random_range(0..2);
            counts.push(k);
            next += k as usize;
        }
        total += next;
        if total > max_vertices {
            return None;
        }
        level = next;
    }
    counts.extend(std::iter::repeat_n(0, level));
    Some(counts)
}

fn change_of_measure() -> Outcome {
    let t = Instant::now();
    let mut rng = stream(SEED, Purpose::Oracle, 101);
    let (mut trees, mut instances, mut paths, mut bad) = (0, 0, 0, Vec::new());
    // m = 2 trees fit in 12 vertices only at n = 1; m = 1 trees cover n <= 3.
    let plan: Vec<(u32, u32)> = (0..20)
        .map(|i| if i % 4 == 3 { (2, 1) } else { (1, 3) })
        .collect();
    for (m, depth) in plan {
        let counts = loop {
            if let Some(c) = min_degree_counts(m, depth, 12, &mut rng) {
                break c;
            }
        };
        let tree = Tree::from_child_counts(counts, Some(depth + 1)).expect("valid counts");
        trees += 1;
        let max_deg = (0..tree.len() as NodeId)
            .map(|v| tree.deg(v))
            .max()
            .unwrap_or(m);
        let k = sandwich_constants(m, max_deg.max(m)).expect("constants");
        let mi = i64::from(m);
        let big_m = Q::new((4 * mi).into(), ((mi + 1) * (mi + 1)).into());
        let c1 = Q::new((mi + 1).into(), (2 * mi).into());
        if k.big_m != big_m || k.c1 != c1 {
            bad.push(format!("constants m = {m}"));
        }
        for n in 1..=depth as usize {
            instances += 1;
            match verify_sandwich(&tree, n, &k, 1 << 22) {
                Ok(r) => {
                    paths += r.paths_checked;
                    if !r.passed() || r.identity_residual > 1e-12 {
                        bad.push(format!("tree {trees} n = {n}"));
                    }
                }
                Err(e) => bad.push(e.to_string()),
            }
        }
    }
    let el = t.elapsed();
    outcome(
        bad.is_empty() && trees == 20 && within(el, 120),
        format!("{trees} trees (<= 12 vertices), {instances} (tree, n) instances, {paths} paths, failures {bad:?}, {el:.1?}"),
    )
}

/// SRW return probability at time 2n with max depth <= limit, by listing every path.
fn enumerate_returns(tree: &Tree, n: usize, limit: Option<u32>) -> Q {
    let root = tree.root();
    let neighbours =
        |v: NodeId| -> Vec<NodeId> { tree.parent(v).into_iter().chain(tree.children(v)).collect() };
    let mut total = Q::zero();
    let mut stack: Vec<(NodeId, usize, Q)> = vec![(root, 0, Q::one())];
    while let Some((v, steps, w)) = stack.pop() {
        if steps == 2 * n {
            if v == root {
                total += w;
            }
            continue;
        }
        let nb = neighbours(v);
        let p = Q::new(1.into(), (nb.len() as i64).into());
        for u in nb {
            if limit.is_none_or(|l| tree.depth(u) <= l) {
                stack.push((u, steps + 1, &w * &p));
            }
        }
    }
    total
}

fn bridge_dp() -> Outcome {
    let (mut compared, mut mismatched) = (0usize, 0usize);
    for shape in all_rooted_trees(10) {
        let tree = shape.to_tree();
        if tree.len() < 2 {
            continue;
        }
        for n in 1..=3usize {
            for limit in (1..=n as u32).map(Some).chain([None]) {
                compared += 1;
                let dp = bridge_dp_exact(&tree, n, limit).map(|(p, _)| p);
                if dp.ok() != Some(enumerate_returns(&tree, n, limit)) {
                    mismatched += 1;
                }
            }
        }
    }
    let mc = suite_check("bridge_dp_vs_monte_carlo");
    outcome(
        mismatched == 0 && mc.passed,
        format!(
            "{compared} enumerated cases, {mismatched} mismatches; MC z = {:.2} <= 3 ({})",
            mc.residual, mc.detail
        ),
    )
}

/// Runs the full-size suite once and serves checks by name.
fn suite_check(name: &str) -> OracleCheck {
    use std::sync::OnceLock;
    static CHECKS: OnceLock<Vec<OracleCheck>> = OnceLock::new();
    CHECKS
        .get_or_init(|| run_oracle_suite_checks(&SuiteOptions::default(), SEED))
        .iter()
        .find(|c| c.name == name)
        .cloned()
        .expect("known check")
}

fn couplings() -> Outcome {
    let c = suite_check("coupling_domination");
    outcome(
        c.passed,
        format!("{} domination failures; {}", c.residual, c.detail),
    )
}

fn escape() -> Outcome {
    let k = 2.0;
    // beta = k beta / (1 + k beta) has the positive fixed point (k - 1) / k.
    let beta = (k - 1.0) / k;
    let exact = (k - 1.0) * beta / (k + 1.0);
    let (lo, hi) = spherical_escape(&[2; 30], frontier_lower_bound(2), 1.0)[1];
    let ok = hi - lo < 1e-6 && lo <= exact + 1e-15 && exact <= hi + 1e-15;
    outcome(
        ok,
        format!(
            "bracket [{lo:.12}, {hi:.12}], width {:.2e} < 1e-6, contains {exact:.12}",
            hi - lo
        ),
    )
}

fn extinction() -> Outcome {
    let dist = OffspringDist::from_pairs(&[(0, 0.25), (2, 0.75)]).expect("valid law");
    // Smallest root of 0.75 s^2 - s + 0.25 = 0.
    let q_exact = (1.0 - (1.0f64 - 0.75).sqrt()) / 1.5;
    let q_err = (dist.extinction_q() - q_exact).abs();
    // Dual mean is f'(q).
    let dual_mean_exact = 2.0 * 0.75 * q_exact;
    let dual = dist.dual().expect("dual law");
    let dual_ok = dual.mean() < 1.0 && (dual.mean() - dual_mean_exact).abs() < 1e-10;
    let head = dist.extinct_size_gf(1.0, 0).expect("size gf");
    let (Some(radius), Some(x_o)) = (head.radius_bound, head.x_o) else {
        return outcome(false, "no radius bound");
    };
    let mut worst = f64::NEG_INFINITY;
    for frac in [0.25, 0.5, 0.9, 0.99] {
        for gens in [1, 2, 5, 20, 100, 500] {
            let g = dist.extinct_size_gf(frac * radius, gens).expect("size gf");
            worst = worst.max(if g.certified {
                g.value - x_o
            } else {
                f64::INFINITY
            });
        }
    }
    outcome(
        q_err <= 1e-10 && dual_ok && worst <= 0.0,
        format!(
            "|q - 1/3| = {q_err:.1e}, dual mean {:.6}, max F_n - x_o = {worst:.4}",
            dual.mean()
        ),
    )
}

fn case1() -> Outcome {
    let t = Instant::now();
    let cfg = ExperimentConfig::standard(ExperimentKind::Case1Scaling);
    let out = match run_experiment(&cfg) {
        Ok(o) => o,
        Err(e) => return outcome(false, e.to_string()),
    };
    let el = t.elapsed();
    let get = |s: &str| out.aggregate(s).unwrap_or(f64::NAN);
    let (slope, lo, hi) = (get("slope"), get("slope_ci_lo"), get("slope_ci_hi"));
    let ok = (0.20..=0.45).contains(&slope)
        && lo > 0.0
        && hi < 1.0
        && within(el, 30 * 60)
        && cfg.replicas >= 20;
    outcome(
        ok,
        format!(
            "slope {slope:.4} in [0.20, 0.45], CI [{lo:.4}, {hi:.4}] excludes 0 and 1, {} replicas, n {:?}, {el:.0?}",
            cfg.replicas, cfg.n_grid
        ),
    )
}

fn case2() -> Outcome {
    let mut cfg = ExperimentConfig::standard(ExperimentKind::Case2Diagnostics);
    cfg.n_grid = vec![4, 6, 8];
    let out = match run_experiment(&cfg) {
        Ok(o) => o,
        Err(e) => return outcome(false, e.to_string()),
    };
    let diags: Vec<f64> = out
        .records
        .iter()
        .filter(|r| r.stat == "diagnostic")
        .map(|r| r.value)
        .collect();
    let saturation = out
        .records
        .iter()
        .filter(|r| r.stat == "saturation_residual")
        .map(|r| r.value)
        .fold(0.0, f64::max);
    let diag_ok = diags.len() == cfg.n_grid.len() * cfg.replicas
        && diags.iter().all(|d| d.is_finite() && *d < 0.0);

    // Exhaustive sandwich check on trees of the same law, small enough to enumerate.
    let dist = cfg.offspring();
    let mut rng = stream(SEED, Purpose::Oracle, 102);
    let mut sandwich_bad = 0;
    for i in 0..6u32 {
        let n = 1 + (i % 2) as usize;
        let tree = sample_gw(&dist, n as u32 + 1, 1 << 16, &mut rng).expect("small tree");
        let k = sandwich_constants(dist.min_support(), dist.max_support()).expect("constants");
        sandwich_bad +=
            usize::from(!verify_sandwich(&tree, n, &k, 1 << 22).is_ok_and(|r| r.passed()));
    }
    outcome(
        diag_ok && saturation <= 1e-12 && sandwich_bad == 0,
        format!("diagnostics {diags:.4?}, max |p(L = 2n) - p_return| = {saturation:.1e}, sandwich failures {sandwich_bad}"),
    )
}

fn first_return() -> Outcome {
    let pmf = z_first_return_pmf(20);
    let mut worst = 0.0f64;
    for k in 1..=20u32 {
        // [x^{2k}] (1 - sqrt(1 - x^2)) = C_{k-1} / 2^{2k-1}, C_j = binom(2j, j) / (j + 1).
        let j = u128::from(k - 1);
        let binom = (1..=j).fold(1u128, |acc, i| acc * (j + i) / i);
        let closed = (binom / (j + 1)) as f64 / 2f64.powi(2 * k as i32 - 1);
        worst = worst.max((pmf[k as usize - 1] - closed).abs());
    }
    outcome(
        worst <= 1e-12,
        format!("max |pmf - closed form| over k <= 20 = {worst:.1e}"),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("confinement constant", confinement),
        (
            "hitting-moment bound, all trees <= 7 vertices",
            moment_bound,
        ),
        ("change of measure and sandwich", change_of_measure),
        ("bridge DP vs enumeration and Monte Carlo", bridge_dp),
        ("coupling domination", couplings),
        ("escape probability, binary tree cap 30", escape),
        ("extinction, dual law and size GF", extinction),
        ("case-1 displacement scaling", case1),
        ("case-2 diagnostics", case2),
        ("first-return generating function", first_return),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let o = run();
        failed += usize::from(!o.passed);
        println!(
            "{} {name}: {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
