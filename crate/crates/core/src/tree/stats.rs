//! Trap statistics and ancestral degree products.

use super::{NodeId, Tree};

/// Which per-vertex trap statistic to maximise over a level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrapMode {
    /// d_T(v): length of the run of degree-one vertices starting at v.
    Pipe,
    /// h_T(v): length of the longest descending path from v on which every
    /// vertex but the last has exactly `m` children, all leaves except the next one.
    LeafPipe { m: u32 },
    /// w_T(v): number of generations below v in which every vertex has exactly `m` children.
    MAry { m: u32 },
}

/// Per-level maxima of a trap statistic.
#[derive(Debug, Clone, PartialEq)]
pub struct TrapStats {
    pub mode: TrapMode,
    /// Ancestor degree bound; `None` means no bound.
    pub k: Option<u32>,
    /// Max over eligible vertices of each level (0 on levels with none).
    pub max: Vec<u32>,
    /// Set when some eligible vertex of the level has a statistic cut off by the cap.
    pub censored: Vec<bool>,
    /// Number of eligible vertices per level.
    pub eligible: Vec<u64>,
    /// Per-vertex statistic and its censoring flag.
    pub per_vertex: Vec<(u32, bool)>,
}

/// Maxima of the trap statistic over level-n vertices whose strict
/// ancestors all have at most `k` children.
///
/// A statistic whose defining run reaches a frontier vertex is reported as
/// a lower bound and flagged.
pub fn trap_stats(tree: &Tree, k: Option<u32>, mode: TrapMode) -> TrapStats {
    let n = tree.len();
    let mut stat = vec![(0u32, false); n];
    for v in (0..n as NodeId).rev() {
        stat[v as usize] = if tree.is_frontier(v) {
            (0, true)
        } else {
            vertex_stat(tree, v, mode, &stat)
        };
    }
    let mut eligible = vec![false; n];
    eligible[0] = true;
    for v in 1..n as NodeId {
        let p = tree.parent(v).expect("non-root");
        eligible[v as usize] = eligible[p as usize] && k.is_none_or(|k| tree.deg(p) <= k);
    }
    let levels = tree.height() as usize + 1;
    let mut max = vec![0u32; levels];
    let mut censored = vec![false; levels];
    let mut count = vec![0u64; levels];
    for v in 0..n as NodeId {
        if eligible[v as usize] {
            let d = tree.depth(v) as usize;
            let (s, c) = stat[v as usize];
            max[d] = max[d].max(s);
            censored[d] |= c;
            count[d] += 1;
        }
    }
    TrapStats {
        mode,
        k,
        max,
        censored,
        eligible: count,
        per_vertex: stat,
    }
}

fn vertex_stat(tree: &Tree, v: NodeId, mode: TrapMode, stat: &[(u32, bool)]) -> (u32, bool) {
    let deg = tree.deg(v);
    match mode {
        TrapMode::Pipe => {
            if deg == 1 {
                let (s, c) = stat[tree.children(v).start as usize];
                (s + 1, c)
            } else {
                (0, false)
            }
        }
        TrapMode::LeafPipe { m } => {
            if deg != m {
                return (0, false);
            }
            let mut open = tree.children(v).filter(|&c| !tree.is_leaf(c));
            match (open.next(), open.next()) {
                (None, _) => (1, false),
                (Some(c), None) => {
                    let (s, cens) = stat[c as usize];
                    (s + 1, cens)
                }
                // Frontier children might still turn out to be leaves.
                _ => {
                    let genuine = tree.children(v).filter(|&c| tree.deg(c) > 0).count();
                    (0, genuine <= 1)
                }
            }
        }
        TrapMode::MAry { m } => {
            if deg != m {
                return (0, false);
            }
            let mut best = (u32::MAX, false);
            for c in tree.children(v) {
                let (s, cens) = stat[c as usize];
                if s < best.0 || (s == best.0 && !cens) {
                    best = (s, cens);
                }
            }
            (best.0 + 1, best.1)
        }
    }
}

/// Ancestral degree products and branch counts.
#[derive(Debug, Clone, PartialEq)]
pub struct PathProducts {
    /// Per level n: log of the max over level-n vertices of the product of
    /// their strict ancestors' child counts.
    pub log_max_product: Vec<f64>,
    /// Per vertex: number of strict ancestors with at least two children.
    pub branch_count: Vec<u32>,
}

impl PathProducts {
    /// The max product itself at level `n` (may be infinite for deep levels).
    pub fn max_product(&self, n: usize) -> f64 {
        self.log_max_product[n].exp()
    }
}

pub fn path_products(tree: &Tree) -> PathProducts {
    let n = tree.len();
    let mut log_prod = vec![0.0f64; n];
    let mut branch = vec![0u32; n];
    for v in 1..n as NodeId {
        let p = tree.parent(v).expect("non-root");
        log_prod[v as usize] = log_prod[p as usize] + (tree.deg(p) as f64).ln();
        branch[v as usize] = branch[p as usize] + u32::from(tree.deg(p) >= 2);
    }
    let log_max_product = (0..=tree.height())
        .map(|d| {
            tree.level(d)
                .map(|v| log_prod[v as usize])
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    PathProducts {
        log_max_product,
        branch_count: branch,
    }
}
