//! Change of measure between the simple and the m-biased walk.
//!
//! For a path that returns to the root at time 2n the derivative of the SRW
//! path law with respect to the BRW path law collapses to
//! m^{-n} prod_j b(x_j), where b(v) = (deg v + m)/(deg v + 1) off the root and
//! b(root) = 1. On trees whose vertices all have at least m children, b
//! peaks at 2m/(m+1) at degree-m vertices, which gives the per-path sandwich
//! M^n c1^{B_n} <= dSRW/dBRW <= M^n c2^{B_n} with M = 4m/(m+1)^2 and B_n the
//! number of visits (before time 2n) to the root or to vertices with more
//! than m children.

use num_traits::{One, Zero};
use serde::Serialize;
use thiserror::Error;

use crate::bridge::{bridge_dp_exact, BridgeError};
use crate::exact::{Mass, Q};
use crate::tree::{NodeId, Tree};
use crate::walk::{transition_prob, Kernel, WalkPath};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeasureError {
    #[error("path does not return to the root at an even time")]
    PathNotBridge,
    #[error("vertex {vertex} has {deg} children, fewer than m = {m}")]
    DegreeBelowM { vertex: NodeId, deg: u32, m: u32 },
    #[error("depth cap {cap} must exceed {need}")]
    CapTooShallow { cap: u32, need: u32 },
    #[error("more than {0} paths to enumerate")]
    PathBudget(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Bridge(#[from] BridgeError),
}

pub type Result<T> = std::result::Result<T, MeasureError>;

/// Per-visit factor b(v) of the derivative, exactly.
pub fn step_factor(tree: &Tree, v: NodeId, m: u32) -> Q {
    let deg = tree.deg(v) as i64;
    let m = m as i64;
    let num = if v == tree.root() { deg + 1 } else { deg + m };
    Q::new(num.into(), (deg + 1).into())
}

fn bridge_check(tree: &Tree, path: &WalkPath) -> Result<()> {
    let steps = path.steps();
    if steps % 2 == 1 || path.vertices[0] != tree.root() || path.vertices[steps] != tree.root() {
        return Err(MeasureError::PathNotBridge);
    }
    Ok(())
}

/// dSRW/dBRW of a root-to-root path, evaluated in log space.
pub fn rn_derivative(tree: &Tree, path: &WalkPath, m: u32) -> Result<f64> {
    Ok(log_rn_derivative(tree, path, m)?.exp())
}

pub fn log_rn_derivative(tree: &Tree, path: &WalkPath, m: u32) -> Result<f64> {
    bridge_check(tree, path)?;
    let n = path.steps() / 2;
    let sum: f64 = path.vertices[..path.steps()]
        .iter()
        .map(|&v| step_factor(tree, v, m).to_f64().ln())
        .sum();
    Ok(sum - n as f64 * (m as f64).ln())
}

/// Exact rational value of the derivative.
pub fn rn_derivative_exact(tree: &Tree, path: &WalkPath, m: u32) -> Result<Q> {
    bridge_check(tree, path)?;
    let n = path.steps() / 2;
    let mut acc = path.vertices[..path.steps()]
        .iter()
        .fold(Q::one(), |acc, &v| acc * step_factor(tree, v, m));
    for _ in 0..n {
        acc /= Q::from_integer((m as i64).into());
    }
    Ok(acc)
}

/// B_n = #{j < steps : x_j is the root or has more than m children}.
pub fn b_count(tree: &Tree, vertices: &[NodeId], m: u32) -> usize {
    let steps = vertices.len().saturating_sub(1);
    vertices[..steps]
        .iter()
        .filter(|&&v| v == tree.root() || tree.deg(v) > m)
        .count()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SandwichConstants {
    pub m: u32,
    /// 4m/(m+1)^2.
    pub big_m: Q,
    pub c1: Q,
    pub c2: Q,
    pub max_deg_considered: u32,
}

impl SandwichConstants {
    pub fn big_m_f64(&self) -> f64 {
        self.big_m.to_f64()
    }
    pub fn c1_f64(&self) -> f64 {
        self.c1.to_f64()
    }
    pub fn c2_f64(&self) -> f64 {
        self.c2.to_f64()
    }
}

/// Constants found by scanning b over the root and every degree in (m, max_deg].
pub fn sandwich_constants(m: u32, max_deg: u32) -> Result<SandwichConstants> {
    if m == 0 || max_deg < m {
        return Err(MeasureError::InvalidArgument(format!(
            "need max_deg >= m >= 1, got m = {m}, max_deg = {max_deg}"
        )));
    }
    let mi = m as i64;
    let peak = Q::new((2 * mi).into(), (mi + 1).into());
    let root_value = Q::one();
    let mut lo = root_value.clone();
    let mut hi = root_value;
    for deg in m + 1..=max_deg {
        let d = deg as i64;
        let b = Q::new((d + mi).into(), (d + 1).into());
        if b < lo {
            lo = b.clone();
        }
        if b > hi {
            hi = b;
        }
    }
    Ok(SandwichConstants {
        m,
        big_m: Q::new((4 * mi).into(), ((mi + 1) * (mi + 1)).into()),
        c1: lo / &peak,
        c2: hi / &peak,
        max_deg_considered: max_deg,
    })
}

/// Outcome of [`verify_sandwich`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SandwichReport {
    pub paths_checked: usize,
    /// min over paths of (RN - M^n c1^B) / RN.
    pub min_slack_lower: f64,
    /// min over paths of (M^n c2^B - RN) / RN.
    pub min_slack_upper: f64,
    /// max over events of |E_BRW[RN 1_A] - SRW(A)|; zero when the identity holds exactly.
    pub identity_residual: f64,
    pub per_path_violations: usize,
    /// Events A (indexed by limit L, with L = n meaning no constraint) where the averaged sandwich fails.
    pub aggregate_violations: Vec<u32>,
}

impl SandwichReport {
    pub fn passed(&self) -> bool {
        self.per_path_violations == 0
            && self.aggregate_violations.is_empty()
            && self.identity_residual == 0.0
    }
}

fn check_degrees(tree: &Tree, n: u32, m: u32) -> Result<()> {
    if let Some(cap) = tree.depth_cap() {
        if cap <= n {
            return Err(MeasureError::CapTooShallow { cap, need: n });
        }
    }
    for v in 0..tree.level_end(n) as NodeId {
        if tree.deg(v) < m {
            return Err(MeasureError::DegreeBelowM {
                vertex: v,
                deg: tree.deg(v),
                m,
            });
        }
    }
    Ok(())
}

fn pow(q: &Q, k: usize) -> Q {
    (0..k).fold(Q::one(), |acc, _| acc * q)
}

/// Exhaustive exact check of the per-path sandwich, the averaged sandwich for
/// A = {return, max <= L} (L = 1..=n), and the change-of-measure identity
/// against the rational bridge DP.
pub fn verify_sandwich(
    tree: &Tree,
    n: usize,
    k: &SandwichConstants,
    max_paths: usize,
) -> Result<SandwichReport> {
    let m = k.m;
    let nn = u32::try_from(n).map_err(|_| MeasureError::InvalidArgument("n too large".into()))?;
    check_degrees(tree, nn, m)?;
    let steps = 2 * n;
    let brw = Kernel::Brw { m };
    // Per max depth L: E_BRW[RN 1], E_BRW[c1^B 1], E_BRW[c2^B 1] over returning paths.
    let mut by_max = vec![[Q::zero(), Q::zero(), Q::zero()]; n + 1];
    let big_m_n = pow(&k.big_m, n);
    let mut report = SandwichReport {
        paths_checked: 0,
        min_slack_lower: f64::INFINITY,
        min_slack_upper: f64::INFINITY,
        identity_residual: 0.0,
        per_path_violations: 0,
        aggregate_violations: Vec::new(),
    };
    let mut path: Vec<NodeId> = vec![tree.root()];
    // Depth-first enumeration; each frame keeps the next neighbour index to try.
    let mut next_choice: Vec<usize> = vec![0];
    while let Some(&choice) = next_choice.last() {
        let x = *path.last().expect("nonempty");
        if path.len() == steps + 1 {
            if x == tree.root() {
                report.paths_checked += 1;
                if report.paths_checked > max_paths {
                    return Err(MeasureError::PathBudget(max_paths));
                }
                let wp = WalkPath {
                    vertices: path.clone(),
                    kernel: brw,
                    cap_touched: false,
                };
                let rn = rn_derivative_exact(tree, &wp, m)?;
                let mut srw_p = Q::one();
                let mut brw_p = Q::one();
                for w in path.windows(2) {
                    srw_p *= exact_step(tree, w[0], w[1], Kernel::Srw);
                    brw_p *= exact_step(tree, w[0], w[1], brw);
                }
                if rn != &srw_p / &brw_p {
                    report.identity_residual = report
                        .identity_residual
                        .max((rn.clone() - &srw_p / &brw_p).to_f64().abs());
                }
                let b = b_count(tree, &path, m);
                let lower = &big_m_n * pow(&k.c1, b);
                let upper = &big_m_n * pow(&k.c2, b);
                if lower > rn || rn > upper {
                    report.per_path_violations += 1;
                }
                report.min_slack_lower =
                    report.min_slack_lower.min(((&rn - &lower) / &rn).to_f64());
                report.min_slack_upper =
                    report.min_slack_upper.min(((&upper - &rn) / &rn).to_f64());
                let max_d = path.iter().map(|&v| tree.depth(v)).max().unwrap_or(0) as usize;
                let slot = &mut by_max[max_d];
                slot[0] += &brw_p * &rn;
                slot[1] += &brw_p * pow(&k.c1, b);
                slot[2] += &brw_p * pow(&k.c2, b);
            }
            path.pop();
            next_choice.pop();
            continue;
        }
        let remaining = steps + 1 - path.len();
        let neighbours: Vec<NodeId> = tree.parent(x).into_iter().chain(tree.children(x)).collect();
        if choice >= neighbours.len() {
            path.pop();
            next_choice.pop();
            continue;
        }
        *next_choice.last_mut().expect("nonempty") += 1;
        let y = neighbours[choice];
        // Prune moves that cannot get back to the root in time.
        if (tree.depth(y) as usize) < remaining {
            path.push(y);
            next_choice.push(0);
        }
    }
    let mut cum = [Q::zero(), Q::zero(), Q::zero()];
    for l in 0..=n {
        for i in 0..3 {
            cum[i] += &by_max[l][i];
        }
        if l == 0 {
            continue;
        }
        let (srw_a, _) = bridge_dp_exact(tree, n, Some(l as u32))?;
        let resid = (&cum[0] - &srw_a).to_f64().abs();
        report.identity_residual = report.identity_residual.max(resid);
        let lower = &big_m_n * &cum[1];
        let upper = &big_m_n * &cum[2];
        if lower > srw_a || srw_a > upper {
            report.aggregate_violations.push(l as u32);
        }
    }
    if report.paths_checked == 0 {
        report.min_slack_lower = 0.0;
        report.min_slack_upper = 0.0;
    }
    Ok(report)
}

fn exact_step(tree: &Tree, u: NodeId, w: NodeId, kernel: Kernel) -> Q {
    let deg = tree.deg(u) as i64;
    let up = tree.parent(u) == Some(w);
    let (num, den) = match (kernel, tree.parent(u)) {
        (_, None) => (1, deg),
        (Kernel::Srw, Some(_)) => (1, deg + 1),
        (Kernel::Brw { m }, Some(_)) => (if up { m as i64 } else { 1 }, deg + m as i64),
    };
    Q::new(num.into(), den.into())
}

/// M^n E_BRW[c^{B_n} 1{X_{2n} = root, max depth <= L}] by a forward DP, for
/// instances too large to enumerate. With c = c1 (c2) this is the lower
/// (upper) side of the averaged sandwich.
pub fn weighted_brw_return(
    tree: &Tree,
    n: usize,
    m: u32,
    c: f64,
    depth_limit: Option<u32>,
) -> Result<f64> {
    let nn = u32::try_from(n).map_err(|_| MeasureError::InvalidArgument("n too large".into()))?;
    let top = depth_limit.map_or(nn, |l| l.min(nn));
    if let Some(cap) = tree.depth_cap() {
        if cap <= top {
            return Err(MeasureError::CapTooShallow { cap, need: top });
        }
    }
    let len = tree.level_end(top);
    let brw = Kernel::Brw { m };
    let mut cur = vec![0.0f64; len];
    cur[0] = 1.0;
    for _ in 0..2 * n {
        let mut next = vec![0.0f64; len];
        for u in 0..len as NodeId {
            let mass = cur[u as usize];
            if mass == 0.0 {
                continue;
            }
            let weight = if u == tree.root() || tree.deg(u) > m {
                mass * c
            } else {
                mass
            };
            if let Some(p) = tree.parent(u) {
                next[p as usize] += weight * transition_prob(tree, u, p, brw);
            }
            if tree.depth(u) < top {
                for ch in tree.children(u) {
                    next[ch as usize] += weight * transition_prob(tree, u, ch, brw);
                }
            }
        }
        cur = next;
    }
    let big_m = 4.0 * m as f64 / ((m + 1) as f64).powi(2);
    Ok(big_m.powi(n as i32) * cur[0])
}
