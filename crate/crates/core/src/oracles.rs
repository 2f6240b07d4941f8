//! Exact reference computations.
//!
//! Walks on Z are handled by killing dynamic programs on an interval.
//! Hitting-time moments on finite trees use the bottom-up recursion for
//! E[e^{lambda L}], in floating point or as a certified rational enclosure.

use num_rational::BigRational;
use num_traits::{One, Signed};
use thiserror::Error;

use crate::exact::{exp_enclosure, q_int, Mass, Q};
use crate::tree::{all_rooted_trees, NodeId, Tree};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("recursion denominator is not positive at vertex {0}: lambda too large for this tree")]
    Denominator(NodeId),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, OracleError>;

/// Rescale threshold for the interval DPs; keeps tiny masses representable.
const RESCALE_BELOW: f64 = 1e-200;

/// ln P(max_{j<=n} |X_j| <= x) for simple random walk on Z started at 0.
pub fn z_confinement_ln(n: u64, x: u32) -> f64 {
    let w = 2 * x as usize + 1;
    // Positions -x..=x plus a zero pad on each side that absorbs killed mass.
    let mut cur = vec![0.0f64; w + 2];
    let mut next = vec![0.0f64; w + 2];
    cur[x as usize + 1] = 1.0;
    let mut log_scale = 0.0;
    for _ in 0..n {
        for i in 1..=w {
            next[i] = 0.5 * (cur[i - 1] + cur[i + 1]);
        }
        std::mem::swap(&mut cur, &mut next);
        let total: f64 = cur[1..=w].iter().sum();
        if total == 0.0 {
            return f64::NEG_INFINITY;
        }
        if total < RESCALE_BELOW {
            cur[1..=w].iter_mut().for_each(|m| *m /= total);
            log_scale += total.ln();
        }
    }
    cur[1..=w].iter().sum::<f64>().ln() + log_scale
}

/// P(max_{j<=n} |X_j| <= x) for simple random walk on Z started at 0.
pub fn z_confinement(n: u64, x: u32) -> f64 {
    z_confinement_ln(n, x).exp()
}

/// P(first return to 0 happens at step 2k) for k = 1..=k_max (index k-1).
///
/// Closed form C(2k, k) 4^-k / (2k - 1), with the central term built up by
/// the ratio (2k - 1) / (2k).
pub fn z_first_return_pmf(k_max: usize) -> Vec<f64> {
    let mut central = 1.0f64;
    (1..=k_max)
        .map(|k| {
            central *= (2 * k - 1) as f64 / (2 * k) as f64;
            central / (2 * k - 1) as f64
        })
        .collect()
}

/// CDF of the exit time of simple random walk started at 1 from [1, b]
/// (exit = reaching 0 or b + 1); entry t is P(exit <= t) for t = 0..=horizon.
pub fn z_exit_time_cdf(b: u32, horizon: usize) -> Result<Vec<f64>> {
    if b < 2 {
        return Err(OracleError::InvalidArgument(format!(
            "need b >= 2, got {b}"
        )));
    }
    let b = b as usize;
    // Index i holds position i; 0 and b + 1 stay zero.
    let mut cur = vec![0.0f64; b + 2];
    let mut next = vec![0.0f64; b + 2];
    cur[1] = 1.0;
    let mut cdf = Vec::with_capacity(horizon + 1);
    let mut alive = 1.0f64;
    cdf.push(0.0);
    for _ in 0..horizon {
        for i in 1..=b {
            next[i] = 0.5 * (cur[i - 1] + cur[i + 1]);
        }
        std::mem::swap(&mut cur, &mut next);
        let still: f64 = cur[1..=b].iter().sum();
        alive = alive.min(still);
        cdf.push(1.0 - alive);
    }
    Ok(cdf)
}

/// E[e^{lambda L}] where L is the time simple random walk from the root of
/// `tree` needs to hit one of `n_leaves` extra leaves attached to the root.
///
/// Child counts are read from the tree as stored; frontier nodes count as leaves.
pub fn hitting_moment(tree: &Tree, n_leaves: u32, lam: f64) -> Result<f64> {
    if n_leaves == 0 {
        return Err(OracleError::InvalidArgument(
            "need at least one attached leaf".into(),
        ));
    }
    moment_recursion(tree, n_leaves, &lam.exp(), |d| *d > 0.0)
}

/// Rational enclosure `[lo, hi]` of E[e^{lambda L}] for rational `0 <= lambda <= 1`.
///
/// The moment is an increasing function of y = e^lambda while every
/// denominator stays positive, so evaluating the recursion exactly at the
/// ends of a rational enclosure of y encloses it.
pub fn hitting_moment_enclosure(tree: &Tree, n_leaves: u32, lam: &Q) -> Result<(Q, Q)> {
    if n_leaves == 0 {
        return Err(OracleError::InvalidArgument(
            "need at least one attached leaf".into(),
        ));
    }
    let (y_lo, y_hi) = exp_enclosure(lam);
    let hi = moment_recursion(tree, n_leaves, &y_hi, |d: &Q| d.is_positive())?;
    let lo = moment_recursion(tree, n_leaves, &y_lo, |d: &Q| d.is_positive())?;
    Ok((lo, hi))
}

/// f_{T(v)} for every non-root v, bottom up, then the root with n leaves:
/// f_v = y / (deg(v) + 1 - y sum_c f_c) and f_root = n y / (n + deg(root) - y sum_c f_c).
fn moment_recursion<T>(
    tree: &Tree,
    n_leaves: u32,
    y: &T,
    positive: impl Fn(&T) -> bool,
) -> Result<T>
where
    T: Mass + std::ops::Sub<Output = T> + std::ops::Div<Output = T>,
{
    let mut f: Vec<T> = vec![T::mass_zero(); tree.len()];
    for v in (0..tree.len() as NodeId).rev() {
        let mut sum = T::mass_zero();
        for c in tree.children(v) {
            sum.add_assign(&f[c as usize]);
        }
        let attached = if v == 0 { n_leaves } else { 1 };
        let base = count::<T>(attached + tree.deg(v));
        let denom = base - y.mul(&sum);
        if !positive(&denom) {
            return Err(OracleError::Denominator(v));
        }
        f[v as usize] = count::<T>(attached).mul(y) / denom;
    }
    Ok(f.swap_remove(0))
}

fn count<T: Mass>(k: u32) -> T {
    let mut acc = T::mass_zero();
    for _ in 0..k {
        acc.add_assign(&T::mass_one());
    }
    acc
}

/// Largest lambda covered by the moment bound:
/// min{n/(18|T|), n^2/(18|T|^2), 1/(18|T(u)|^2) over root children u}.
pub fn admissible_lambda(tree: &Tree, n_leaves: u32) -> Q {
    let size = tree.len() as i64;
    let n = n_leaves as i64;
    let sizes = tree.subtree_sizes();
    let mut best = BigRational::new(n.into(), (18 * size).into());
    let second = BigRational::new((n * n).into(), (18 * size * size).into());
    if second < best {
        best = second;
    }
    for u in tree.children(0) {
        let s = sizes[u as usize] as i64;
        let third = BigRational::new(1.into(), (18 * s * s).into());
        if third < best {
            best = third;
        }
    }
    best
}

/// Outcome of the certified moment-bound check on one (tree, n) pair at
/// the admissible lambda.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentCheck {
    pub tree_size: usize,
    pub n_leaves: u32,
    pub lambda: f64,
    /// Certified upper end of E[e^{lambda L}].
    pub moment_hi: f64,
    /// Certified lower end of e^{lambda (5|T|/n + 1)}.
    pub bound_lo: f64,
    /// moment <= e^{lambda (5|T|/n + 1)}, proven with rationals.
    pub holds: bool,
    /// For n = 1 and |T| >= 2: moment <= e^{lambda (4|T| - 3)}, proven with rationals.
    pub holds_single: Option<bool>,
}

pub fn check_moment_bound(tree: &Tree, n_leaves: u32) -> Result<MomentCheck> {
    let lam = admissible_lambda(tree, n_leaves);
    let size = tree.len() as i64;
    let (_, f_hi) = hitting_moment_enclosure(tree, n_leaves, &lam)?;
    let exponent =
        &lam * (BigRational::new((5 * size).into(), (n_leaves as i64).into()) + Q::one());
    let (bound_lo, _) = exp_enclosure(&exponent);
    let holds_single = (n_leaves == 1 && size >= 2).then(|| {
        let (single_lo, _) = exp_enclosure(&(&lam * q_int(4 * size - 3)));
        f_hi <= single_lo
    });
    Ok(MomentCheck {
        tree_size: tree.len(),
        n_leaves,
        lambda: Mass::to_f64(&lam),
        moment_hi: Mass::to_f64(&f_hi),
        bound_lo: Mass::to_f64(&bound_lo),
        holds: f_hi <= bound_lo,
        holds_single,
    })
}

/// Summary of the certified moment-bound sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSweep {
    pub triples: usize,
    pub violations: usize,
    pub single_checked: usize,
    pub single_violations: usize,
    /// Smallest ln(bound / moment) seen.
    pub min_log_slack: f64,
}

/// Runs [`check_moment_bound`] on every rooted tree with at most
/// `max_vertices` vertices and every `n` in `n_values`.
pub fn moment_bound_sweep(max_vertices: usize, n_values: &[u32]) -> Result<MomentSweep> {
    let mut sweep = MomentSweep {
        triples: 0,
        violations: 0,
        single_checked: 0,
        single_violations: 0,
        min_log_slack: f64::INFINITY,
    };
    for shape in all_rooted_trees(max_vertices) {
        let tree = shape.to_tree();
        for &n in n_values {
            let c = check_moment_bound(&tree, n)?;
            sweep.triples += 1;
            sweep.violations += usize::from(!c.holds);
            if let Some(ok) = c.holds_single {
                sweep.single_checked += 1;
                sweep.single_violations += usize::from(!ok);
            }
            sweep.min_log_slack = sweep.min_log_slack.min(c.bound_lo.ln() - c.moment_hi.ln());
        }
    }
    Ok(sweep)
}

/// P(X_{2n} = root, max depth <= L) for SRW by listing every path, in rationals.
///
/// Exponential in n; meant as an independent check of the bridge DP on
/// small trees. Uses only the adjacency of the tree.
pub fn srw_return_by_enumeration(tree: &Tree, n: usize, depth_limit: Option<u32>) -> Result<Q> {
    if tree.deg(tree.root()) == 0 {
        return Err(OracleError::InvalidArgument("root has no children".into()));
    }
    fn go(tree: &Tree, x: NodeId, left: usize, limit: u32, weight: &Q, acc: &mut Q) {
        if left == 0 {
            if x == tree.root() {
                *acc += weight;
            }
            return;
        }
        let nbrs: Vec<NodeId> = tree.parent(x).into_iter().chain(tree.children(x)).collect();
        let w = weight / BigRational::from_integer((nbrs.len() as i64).into());
        for y in nbrs {
            if tree.depth(y) <= limit && (tree.depth(y) as usize) < left {
                go(tree, y, left - 1, limit, &w, acc);
            }
        }
    }
    let mut acc = Q::from_integer(0.into());
    go(
        tree,
        tree.root(),
        2 * n,
        depth_limit.unwrap_or(u32::MAX),
        &Q::one(),
        &mut acc,
    );
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    #[test]
    fn confinement_small_cases() {
        assert_eq!(z_confinement(1, 1), 1.0);
        assert_eq!(z_confinement(2, 1), 0.5);
        assert_eq!(z_confinement(0, 1), 1.0);
    }

    #[test]
    fn confinement_monotone() {
        for x in 1..6 {
            let mut prev = 1.0;
            for n in 0..40 {
                let p = z_confinement(n, x);
                assert!(p <= prev + 1e-15);
                assert!(p <= z_confinement(n, x + 1) + 1e-15);
                prev = p;
            }
        }
    }

    /// Counts the 2^n paths directly.
    #[test]
    fn confinement_matches_path_count() {
        for n in 0..14u32 {
            for x in 1..4i32 {
                let mut good = 0u32;
                for bits in 0..(1u32 << n) {
                    let mut pos = 0i32;
                    let mut ok = true;
                    for j in 0..n {
                        pos += if bits >> j & 1 == 1 { 1 } else { -1 };
                        ok &= pos.abs() <= x;
                    }
                    good += u32::from(ok);
                }
                let exact = good as f64 / (1u64 << n) as f64;
                assert!((z_confinement(n as u64, x as u32) - exact).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn first_return_values() {
        let p = z_first_return_pmf(3);
        assert_eq!(p, vec![0.5, 0.125, 0.0625]);
    }

    /// Coefficients of 1 - sqrt(1 - y) by the binomial series, and first
    /// returns by a DP killed at 0.
    #[test]
    fn first_return_matches_generating_function_and_dp() {
        let p = z_first_return_pmf(20);
        let mut binom = 1.0f64; // (1/2 choose k)
        for k in 1..=20usize {
            binom *= (0.5 - (k as f64 - 1.0)) / k as f64;
            let coeff = if k % 2 == 1 { binom } else { -binom };
            assert!((p[k - 1] - coeff).abs() < 1e-12, "k={k}");
        }
        // Walk on {1, 2, ...} after a first step away from 0 (by symmetry).
        let mut direct = [0.0f64; 21];
        let mut state = vec![0.0f64; 64];
        state[1] = 1.0;
        for step in 2..=40usize {
            let mut next = vec![0.0f64; 64];
            let mut back = 0.0;
            for i in 1..63 {
                if i == 1 {
                    back += 0.5 * state[i];
                } else {
                    next[i - 1] += 0.5 * state[i];
                }
                next[i + 1] += 0.5 * state[i];
            }
            state = next;
            if step % 2 == 0 {
                direct[step / 2] = back;
            }
        }
        for k in 1..=20 {
            assert!((p[k - 1] - direct[k]).abs() < 1e-12, "k={k}");
        }
        let partial: f64 = p.iter().sum();
        assert!(partial < 1.0);
    }

    #[test]
    fn exit_time_examples() {
        let cdf = z_exit_time_cdf(2, 2).unwrap();
        assert_eq!(cdf[1], 0.5);
        assert_eq!(cdf[2], 0.75);
        let cdf = z_exit_time_cdf(3, 400).unwrap();
        let mean: f64 = (0..400).map(|t| 1.0 - cdf[t]).sum();
        assert!((mean - 3.0).abs() < 1e-9);
        assert!(cdf[400] > 1.0 - 1e-12);
        assert!(z_exit_time_cdf(1, 3).is_err());
    }

    #[test]
    fn moment_closed_forms() {
        let lam = 0.01;
        let single = Tree::from_child_counts(vec![0], None).unwrap();
        assert!((hitting_moment(&single, 1, lam).unwrap() - lam.exp()).abs() < 1e-15);
        for m in 1..5u32 {
            let mut counts = vec![m];
            counts.extend(std::iter::repeat_n(0, m as usize));
            let star = Tree::from_child_counts(counts, None).unwrap();
            let expect = lam.exp() / (1.0 - m as f64 * ((2.0 * lam).exp() - 1.0));
            assert!((hitting_moment(&star, 1, lam).unwrap() - expect).abs() < 1e-13);
        }
        let star = Tree::from_child_counts(vec![3, 0, 0, 0], None).unwrap();
        assert!(matches!(
            hitting_moment(&star, 1, 1.0),
            Err(OracleError::Denominator(0))
        ));
    }

    #[test]
    fn lambda_range_for_single_vertex() {
        let single = Tree::from_child_counts(vec![0], None).unwrap();
        assert_eq!(
            admissible_lambda(&single, 2),
            BigRational::new(2.into(), 18.into())
        );
    }

    #[test]
    fn enclosure_contains_float_value() {
        let t =
            Tree::from_parents(&[None, Some(0), Some(0), Some(1), Some(1), Some(3)], None).unwrap();
        let lam = admissible_lambda(&t, 2);
        let (lo, hi) = hitting_moment_enclosure(&t, 2, &lam).unwrap();
        let f = hitting_moment(&t, 2, Mass::to_f64(&lam)).unwrap();
        assert!(Mass::to_f64(&lo) <= f * (1.0 + 1e-14) && f <= Mass::to_f64(&hi) * (1.0 + 1e-14));
    }

    /// Simulates L directly on a 6-vertex tree with n extra root leaves.
    #[test]
    fn moment_matches_monte_carlo() {
        let t =
            Tree::from_parents(&[None, Some(0), Some(0), Some(1), Some(1), Some(3)], None).unwrap();
        for n in [1u32, 2] {
            let lam = 0.02;
            let exact = hitting_moment(&t, n, lam).unwrap();
            let mut rng = seeded(99 + n as u64);
            let reps = 1_000_000;
            let (mut s1, mut s2) = (0.0, 0.0);
            for _ in 0..reps {
                let mut v = 0u32;
                let mut steps = 0u32;
                loop {
                    steps += 1;
                    let kids = t.deg(v);
                    let extra = if v == 0 { n } else { 1 };
                    let pick = rng.random_range(0..kids + extra);
                    if pick < kids {
                        v = t.children(v).start + pick;
                    } else if v == 0 {
                        break;
                    } else {
                        v = t.parent(v).unwrap();
                    }
                }
                let e = (lam * steps as f64).exp();
                s1 += e;
                s2 += e * e;
            }
            let mean = s1 / reps as f64;
            let se = ((s2 / reps as f64 - mean * mean) / reps as f64).sqrt();
            assert!(
                (mean - exact).abs() < 3.0 * se,
                "n={n}: mc {mean} vs {exact} (se {se})"
            );
        }
    }

    #[test]
    fn moment_sweep_small() {
        let s = moment_bound_sweep(5, &[1, 2, 3]).unwrap();
        assert_eq!(s.triples, (1 + 1 + 2 + 4 + 9) * 3);
        assert_eq!(s.violations, 0);
        assert_eq!(s.single_violations, 0);
    }
}
