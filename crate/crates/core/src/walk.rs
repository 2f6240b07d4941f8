//! Random walks on trees and their observables.
//!
//! Two kernels are supported. The simple random walk (SRW) moves to a
//! uniform neighbour. The biased walk (BRW) with parameter m moves from a
//! non-root vertex to its parent with probability m/(deg+m) and to each
//! child with probability 1/(deg+m); from the root it picks a uniform
//! child. At a vertex with exactly m children the BRW depth process is fair.
//!
//! Frontier vertices of a capped tree have no recorded children, so both
//! kernels reflect there; paths that touch the cap are flagged.

use std::collections::HashMap;

use rand::Rng;
use thiserror::Error;

use crate::tree::{BackboneMarks, NodeId, Tree};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WalkError {
    #[error("the root has no children: no move exists")]
    IsolatedRoot,
    #[error("coupling reached leaf {0}; the coupling needs a leafless tree")]
    LeafInCoupling(NodeId),
    #[error("walk reached the depth cap; observables of the infinite tree are unreliable")]
    CapTouched,
    #[error("{child} is not a child of {parent}")]
    NotAChild { parent: NodeId, child: NodeId },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, WalkError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kernel {
    Srw,
    Brw { m: u32 },
}

/// Vertex sequence X_0..X_T of a walk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WalkPath {
    pub vertices: Vec<NodeId>,
    pub kernel: Kernel,
    /// Some X_j sat at the depth cap.
    pub cap_touched: bool,
}

impl WalkPath {
    pub fn new(vertices: Vec<NodeId>, kernel: Kernel, tree: &Tree) -> Self {
        let cap_touched = vertices.iter().any(|&v| tree.is_frontier(v));
        WalkPath {
            vertices,
            kernel,
            cap_touched,
        }
    }

    pub fn steps(&self) -> usize {
        self.vertices.len() - 1
    }

    pub fn depths(&self, tree: &Tree) -> Vec<u32> {
        self.vertices.iter().map(|&v| tree.depth(v)).collect()
    }
}

/// Probability that one step of `kernel` goes from `u` to `w` (0 if not adjacent).
pub fn transition_prob(tree: &Tree, u: NodeId, w: NodeId, kernel: Kernel) -> f64 {
    let deg = tree.deg(u);
    let to_parent = tree.parent(u) == Some(w);
    let to_child = tree.parent(w) == Some(u);
    if !to_parent && !to_child {
        return 0.0;
    }
    match (kernel, tree.parent(u)) {
        (Kernel::Srw, None) => 1.0 / deg as f64,
        (Kernel::Srw, Some(_)) => 1.0 / (deg + 1) as f64,
        (Kernel::Brw { .. }, None) => 1.0 / deg as f64,
        (Kernel::Brw { m }, Some(_)) => {
            if to_parent {
                m as f64 / (deg + m) as f64
            } else {
                1.0 / (deg + m) as f64
            }
        }
    }
}

/// All moves out of `v` with their probabilities.
pub fn step_distribution(tree: &Tree, v: NodeId, kernel: Kernel) -> Result<Vec<(NodeId, f64)>> {
    if tree.parent(v).is_none() && tree.deg(v) == 0 {
        return Err(WalkError::IsolatedRoot);
    }
    let mut out: Vec<(NodeId, f64)> = tree
        .children(v)
        .map(|c| (c, transition_prob(tree, v, c, kernel)))
        .collect();
    if let Some(p) = tree.parent(v) {
        out.push((p, transition_prob(tree, v, p, kernel)));
    }
    Ok(out)
}

/// Samples one step of `kernel` from `v`.
pub fn step_kernel<R: Rng + ?Sized>(
    tree: &Tree,
    v: NodeId,
    kernel: Kernel,
    rng: &mut R,
) -> Result<NodeId> {
    let deg = tree.deg(v);
    match tree.parent(v) {
        None if deg == 0 => Err(WalkError::IsolatedRoot),
        None => Ok(tree.children(v).start + rng.random_range(0..deg)),
        Some(p) => {
            let extra = match kernel {
                Kernel::Srw => 1,
                Kernel::Brw { m } => m,
            };
            let r = rng.random_range(0..deg + extra);
            Ok(if r < deg {
                tree.children(v).start + r
            } else {
                p
            })
        }
    }
}

/// A `steps`-step path of `kernel` from the root.
pub fn sample_path<R: Rng + ?Sized>(
    tree: &Tree,
    kernel: Kernel,
    steps: usize,
    rng: &mut R,
) -> Result<WalkPath> {
    let mut vertices = Vec::with_capacity(steps + 1);
    let mut v = tree.root();
    vertices.push(v);
    for _ in 0..steps {
        v = step_kernel(tree, v, kernel, rng)?;
        vertices.push(v);
    }
    Ok(WalkPath::new(vertices, kernel, tree))
}

/// ln of the probability of `path` under `kernel`.
pub fn log_path_prob(tree: &Tree, path: &[NodeId], kernel: Kernel) -> f64 {
    path.windows(2)
        .map(|w| transition_prob(tree, w[0], w[1], kernel).ln())
        .sum()
}

/// Which coupling of a tree walk with a walk on the integers to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CouplingVariant {
    /// Tree walk from the root; line walk on {0, 1, ...} from 0, dominated
    /// by the tree walk's depth.
    FromRoot,
    /// Tree walk from `v`, watched only on its steps between two vertices of
    /// T(v_o); line walk on Z from 0, with |line| dominated by the watched
    /// walk's distance to `v`.
    FromVertex { v: NodeId, v_o: NodeId },
}

/// Output of [`couple_to_line`].
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledPaths {
    pub tree_path: WalkPath,
    /// Line walk; one entry per tree step (FromRoot) or per watched step (FromVertex), plus the start.
    pub line: Vec<i64>,
    /// Watched tree positions aligned with `line` (the tree path itself for FromRoot).
    pub watched: Vec<NodeId>,
}

/// Runs a coupled pair for `steps` tree steps.
///
/// While the line walk is strictly inside the tree distance it takes an
/// independent fair step. When they agree (and the line is not at 0) a tree
/// step toward the target forces the line toward 0, and a tree step away
/// sends the line away with probability (t + a) / (2a), where t and a count
/// the tree moves toward and away from the target. Away from the watched
/// subtree's root this is (deg + 1) / (2 deg); the general form keeps the
/// line walk fair at the subtree root too. The line marginal is an exact
/// simple random walk (reflected at 0 for FromRoot) and domination holds
/// on every path.
pub fn couple_to_line<R: Rng + ?Sized>(
    tree: &Tree,
    steps: usize,
    variant: CouplingVariant,
    rng: &mut R,
) -> Result<CoupledPaths> {
    let (start, target, sub_root) = match variant {
        CouplingVariant::FromRoot => (0, 0, 0),
        CouplingVariant::FromVertex { v, v_o } => {
            if v == v_o || !tree.is_ancestor(v_o, v) {
                return Err(WalkError::InvalidArgument(format!(
                    "{v} is not a strict descendant of {v_o}"
                )));
            }
            if tree.deg(v_o) < 2 {
                return Err(WalkError::InvalidArgument(format!(
                    "v_o = {v_o} needs at least two children"
                )));
            }
            (v, v, v_o)
        }
    };
    let reflected = matches!(variant, CouplingVariant::FromRoot);
    let dist = |u: NodeId| distance(tree, u, target);
    let inside = |u: NodeId| tree.is_ancestor(sub_root, u);
    let mut x = start;
    let mut vertices = vec![x];
    let mut line = vec![0i64];
    let mut watched = vec![x];
    for _ in 0..steps {
        if tree.is_frontier(x) {
            return Err(WalkError::CapTouched);
        }
        if tree.deg(x) == 0 {
            return Err(WalkError::LeafInCoupling(x));
        }
        let y = step_kernel(tree, x, Kernel::Srw, rng)?;
        let u: f64 = rng.random();
        vertices.push(y);
        let counted = inside(x) && inside(y);
        x = y;
        if !counted {
            continue;
        }
        let from = *watched.last().expect("nonempty");
        let h = *line.last().expect("nonempty");
        let d_from = dist(from) as i64;
        let next = if h.abs() == d_from && h != 0 {
            let toward_step = dist(y) < dist(from);
            let sign = h.signum();
            if toward_step {
                h - sign
            } else {
                let (t, a) = move_counts(tree, from, target, sub_root);
                if u < (t + a) as f64 / (2 * a) as f64 {
                    h + sign
                } else {
                    h - sign
                }
            }
        } else if reflected && h == 0 {
            1
        } else if u < 0.5 {
            h + 1
        } else {
            h - 1
        };
        line.push(next);
        watched.push(y);
    }
    if reflected {
        watched = vertices.clone();
    }
    Ok(CoupledPaths {
        tree_path: WalkPath::new(vertices, Kernel::Srw, tree),
        line,
        watched,
    })
}

/// Moves from `u` that stay in T(sub_root), split into (toward, away) from `target`.
fn move_counts(tree: &Tree, u: NodeId, target: NodeId, sub_root: NodeId) -> (u32, u32) {
    let up = u32::from(u != sub_root && tree.parent(u).is_some());
    let total = tree.deg(u) + up;
    let toward = u32::from(u != target);
    (toward, total - toward)
}

/// Graph distance between two vertices.
pub fn distance(tree: &Tree, a: NodeId, b: NodeId) -> u32 {
    let (mut a, mut b) = (a, b);
    let mut d = 0;
    while tree.depth(a) > tree.depth(b) {
        a = tree.parent(a).expect("deeper vertex has a parent");
        d += 1;
    }
    while tree.depth(b) > tree.depth(a) {
        b = tree.parent(b).expect("deeper vertex has a parent");
        d += 1;
    }
    while a != b {
        a = tree.parent(a).expect("common ancestor exists");
        b = tree.parent(b).expect("common ancestor exists");
        d += 2;
    }
    d
}

/// Never-return probabilities beta(u) = P(SRW from u never visits parent(u)),
/// bracketed on a capped tree.
///
/// beta(u) = S / (1 + S) with S the sum of beta over u's children; leaves
/// have beta = 0. Frontier vertices take the supplied bracket. beta = 1 is
/// always a valid upper value. beta = 0 is always a valid lower value but is
/// a fixed point of the recursion, so it yields a trivial lower bracket; when
/// every vertex beyond the cap is known to have at least m >= 2 children, the
/// subtree contains a complete m-ary tree and Rayleigh monotonicity gives
/// beta >= (m - 1) / m (see [`frontier_lower_bound`]). The map is monotone, so
/// brackets nest as the cap grows.
#[derive(Debug, Clone, PartialEq)]
pub struct EscapeTable {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Certified beta lower bound at a vertex whose whole subtree has at least `min_children` children per vertex.
pub fn frontier_lower_bound(min_children: u32) -> f64 {
    if min_children < 2 {
        0.0
    } else {
        (min_children - 1) as f64 / min_children as f64
    }
}

fn beta_step(s: f64) -> f64 {
    s / (1.0 + s)
}

impl EscapeTable {
    /// Bracket with no knowledge beyond the cap: frontier beta in [0, 1].
    pub fn new(tree: &Tree) -> Self {
        Self::with_frontier(tree, 0.0, 1.0)
    }

    pub fn with_frontier(tree: &Tree, frontier_lower: f64, frontier_upper: f64) -> Self {
        assert!((0.0..=frontier_upper).contains(&frontier_lower) && frontier_upper <= 1.0);
        let n = tree.len();
        let mut lower = vec![0.0; n];
        let mut upper = vec![0.0; n];
        for v in (0..n as NodeId).rev() {
            let vi = v as usize;
            if tree.is_frontier(v) {
                lower[vi] = frontier_lower;
                upper[vi] = frontier_upper;
                continue;
            }
            let (sl, su) = tree.children(v).fold((0.0, 0.0), |(l, u), c| {
                (l + lower[c as usize], u + upper[c as usize])
            });
            lower[vi] = beta_step(sl);
            upper[vi] = beta_step(su);
        }
        EscapeTable { lower, upper }
    }

    /// Bracket of P(first step goes to a child other than v', and the walk never returns to v).
    pub fn escape_prob(&self, tree: &Tree, v: NodeId, v_prime: NodeId) -> Result<(f64, f64)> {
        if tree.parent(v).is_none() {
            return Err(WalkError::InvalidArgument(
                "escape probabilities are defined for non-root vertices".into(),
            ));
        }
        if tree.parent(v_prime) != Some(v) {
            return Err(WalkError::NotAChild {
                parent: v,
                child: v_prime,
            });
        }
        let denom = (tree.deg(v) + 1) as f64;
        let (l, u) = tree
            .children(v)
            .filter(|&c| c != v_prime)
            .fold((0.0, 0.0), |(l, u), c| {
                (l + self.lower[c as usize], u + self.upper[c as usize])
            });
        Ok((l / denom, u / denom))
    }
}

/// Escape brackets on a spherically symmetric tree, where every vertex at
/// depth d has `level_degrees[d]` children and depth `level_degrees.len()`
/// is the cap. Entry d (for d >= 1) brackets the escape probability from a
/// depth-d vertex avoiding one child. Needs no materialised tree, so deep
/// caps are cheap.
pub fn spherical_escape(
    level_degrees: &[u32],
    frontier_lower: f64,
    frontier_upper: f64,
) -> Vec<(f64, f64)> {
    let cap = level_degrees.len();
    let mut beta = vec![(0.0, 0.0); cap + 1];
    beta[cap] = (frontier_lower, frontier_upper);
    for d in (0..cap).rev() {
        let k = level_degrees[d] as f64;
        beta[d] = (beta_step(k * beta[d + 1].0), beta_step(k * beta[d + 1].1));
    }
    (0..cap)
        .map(|d| {
            let k = level_degrees[d];
            let others = k.saturating_sub(1) as f64;
            let denom = (k + 1) as f64;
            (
                others * beta[d + 1].0 / denom,
                others * beta[d + 1].1 / denom,
            )
        })
        .collect()
}

/// Bracket of the escape probability from `v` avoiding `v_prime`.
pub fn escape_prob(tree: &Tree, v: NodeId, v_prime: NodeId) -> Result<(f64, f64)> {
    EscapeTable::new(tree).escape_prob(tree, v, v_prime)
}

/// Number of j in [1, n) with certified escape probability at least `p`
/// along the root-to-`v` path v_0..v_n.
pub fn n_p_count(tree: &Tree, table: &EscapeTable, v: NodeId, p: f64) -> Result<usize> {
    let path = tree.path_from_root(v);
    let mut count = 0;
    for j in 1..path.len().saturating_sub(1) {
        let (lower, _) = table.escape_prob(tree, path[j], path[j + 1])?;
        count += usize::from(lower >= p);
    }
    Ok(count)
}

/// How the backbone-observed sequence advances.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackboneClock {
    /// Y advances on each step of X between two backbone vertices, so Y is
    /// a simple random walk on the backbone.
    EdgeSteps,
    /// Y advances on each visit of X to the backbone, including returns
    /// from a bush to the vertex it hangs from.
    Visits,
}

/// The walk seen through the backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneObservables {
    pub y: Vec<NodeId>,
    /// Time index in X of each Y entry; strictly increasing, N_0 = 0.
    pub n_idx: Vec<usize>,
    /// S(i) = sum_{t < i} r(Y_t), for i = 0..=len(Y).
    pub s: Vec<f64>,
    /// W(i) = #{j < i : Y_j is the root or has two or more backbone children}.
    pub w: Vec<usize>,
    /// min{j : N_j > 2n}, if the path is long enough.
    pub t_n: Option<usize>,
    /// Net depth change of Y accumulated at non-branching vertices.
    pub phi: Vec<i64>,
    /// Net depth change of Y accumulated at branching vertices.
    pub phi_prime: Vec<i64>,
}

pub fn backbone_observe(
    tree: &Tree,
    marks: &BackboneMarks,
    path: &WalkPath,
    n: usize,
    clock: BackboneClock,
) -> Result<BackboneObservables> {
    if path.cap_touched {
        return Err(WalkError::CapTouched);
    }
    let xs = &path.vertices;
    if xs.first() != Some(&tree.root()) {
        return Err(WalkError::InvalidArgument(
            "path must start at the root".into(),
        ));
    }
    let mut y = vec![xs[0]];
    let mut n_idx = vec![0usize];
    for t in 1..xs.len() {
        let keep = match clock {
            BackboneClock::EdgeSteps => marks.is_backbone(xs[t - 1]) && marks.is_backbone(xs[t]),
            BackboneClock::Visits => marks.is_backbone(xs[t]),
        };
        if keep {
            y.push(xs[t]);
            n_idx.push(t);
        }
    }
    let mut s = vec![0.0];
    let mut w = vec![0usize];
    for &v in &y {
        s.push(s.last().expect("nonempty") + marks.r[v as usize]);
        w.push(w.last().expect("nonempty") + usize::from(marks.is_branching(v)));
    }
    let t_n = n_idx.iter().position(|&t| t > 2 * n);
    let mut phi = vec![0i64];
    let mut phi_prime = vec![0i64];
    for pair in y.windows(2) {
        let delta = tree.depth(pair[1]) as i64 - tree.depth(pair[0]) as i64;
        let (dp, dpp) = if marks.is_branching(pair[0]) {
            (0, delta)
        } else {
            (delta, 0)
        };
        phi.push(phi.last().expect("nonempty") + dp);
        phi_prime.push(phi_prime.last().expect("nonempty") + dpp);
    }
    Ok(BackboneObservables {
        y,
        n_idx,
        s,
        w,
        t_n,
        phi,
        phi_prime,
    })
}

/// Summary statistics of one path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathStats {
    pub max_disp: u32,
    /// #{j < steps : X_j is the root or has more than m children}.
    pub b_n: usize,
    /// Largest number of visits to a single strict descendant of v_o.
    pub max_local_time_below: usize,
    /// Path has even length and ends at the root.
    pub returned_at_2n: bool,
}

pub fn path_statistics(tree: &Tree, path: &WalkPath, m: u32, v_o: NodeId) -> PathStats {
    let xs = &path.vertices;
    let steps = path.steps();
    let max_disp = xs.iter().map(|&v| tree.depth(v)).max().unwrap_or(0);
    let b_n = xs[..steps]
        .iter()
        .filter(|&&v| v == tree.root() || tree.deg(v) > m)
        .count();
    let mut visits: HashMap<NodeId, usize> = HashMap::new();
    for &v in xs {
        if v != v_o && tree.is_ancestor(v_o, v) {
            *visits.entry(v).or_default() += 1;
        }
    }
    PathStats {
        max_disp,
        b_n,
        max_local_time_below: visits.values().copied().max().unwrap_or(0),
        returned_at_2n: steps.is_multiple_of(2) && xs[steps] == tree.root(),
    }
}
