//! Tree samplers: plain Galton-Watson, conditioned on survival, and spine laws.
//!
//! All samplers expand the tree one generation at a time, so the child
//! counts they draw come out in level order and feed
//! [`Tree::from_child_counts`] directly.

use rand::Rng;

use super::{BackboneMarks, NodeId, Result, Tree, TreeError};
use crate::offspring::OffspringDist;

/// Default node budget for a single sampled tree.
pub const DEFAULT_MAX_NODES: usize = 1 << 27;

/// Tracks generation boundaries while child counts are appended in level order.
struct LevelCursor {
    len: usize,
    level_end: usize,
    depth: u32,
    max_nodes: usize,
}

impl LevelCursor {
    fn new(max_nodes: usize) -> Self {
        LevelCursor {
            len: 1,
            level_end: 1,
            depth: 0,
            max_nodes,
        }
    }

    /// Depth of node `v`; must be called for v = 0, 1, 2, ... in order.
    fn enter(&mut self, v: usize) -> u32 {
        if v == self.level_end {
            self.depth += 1;
            self.level_end = self.len;
        }
        self.depth
    }

    /// Registers `z` new children and returns the index of the first.
    fn grow(&mut self, z: u32) -> Result<usize> {
        let first = self.len;
        self.len += z as usize;
        if self.len > self.max_nodes {
            return Err(TreeError::NodeBudget(self.max_nodes));
        }
        Ok(first)
    }
}

/// Plain Galton-Watson tree expanded to generation `depth_cap`.
pub fn sample_gw<R: Rng + ?Sized>(
    dist: &OffspringDist,
    depth_cap: u32,
    max_nodes: usize,
    rng: &mut R,
) -> Result<Tree> {
    let mut counts = Vec::new();
    let mut cur = LevelCursor::new(max_nodes);
    let mut v = 0;
    while v < cur.len {
        let depth = cur.enter(v);
        let z = if depth < depth_cap {
            dist.sample(rng)
        } else {
            0
        };
        cur.grow(z)?;
        counts.push(z);
        v += 1;
    }
    Tree::from_child_counts(counts, Some(depth_cap))
}

/// Galton-Watson tree conditioned on survival, with its exact backbone marks.
///
/// A backbone vertex draws Z children and marks each as surviving with
/// probability 1 - q, redrawing until at least one survives. Survivors are
/// backbone vertices; every other child roots a bush grown with the
/// extinction-conditioned law. Bushes are truncated at the cap like
/// everything else, and a bush larger than `max_bush` is an error.
pub fn sample_gw_survival<R: Rng + ?Sized>(
    dist: &OffspringDist,
    depth_cap: u32,
    max_nodes: usize,
    max_bush: usize,
    rng: &mut R,
) -> Result<(Tree, BackboneMarks)> {
    if !dist.is_supercritical() {
        return Err(TreeError::NotSupercritical);
    }
    let q = dist.extinction_q();
    let dual = if q > 0.0 {
        Some(
            dist.dual()
                .map_err(|e| TreeError::InvalidArgument(e.to_string()))?,
        )
    } else {
        None
    };
    const BACKBONE: u32 = u32::MAX;
    let mut owner = vec![BACKBONE];
    let mut bush_size: Vec<usize> = Vec::new();
    let mut counts = Vec::new();
    let mut cur = LevelCursor::new(max_nodes);
    let mut survive = Vec::new();
    let mut v = 0;
    while v < cur.len {
        let depth = cur.enter(v);
        if depth >= depth_cap {
            counts.push(0);
            v += 1;
            continue;
        }
        let id = owner[v];
        if id == BACKBONE {
            let z = loop {
                let z = dist.sample(rng);
                survive.clear();
                survive.extend((0..z).map(|_| q == 0.0 || rng.random::<f64>() < 1.0 - q));
                if survive.iter().any(|&s| s) {
                    break z;
                }
            };
            cur.grow(z)?;
            for &s in &survive {
                if s {
                    owner.push(BACKBONE);
                } else {
                    owner.push(bush_size.len() as u32);
                    bush_size.push(1);
                    if max_bush == 0 {
                        return Err(TreeError::BushBudget(max_bush));
                    }
                }
            }
            counts.push(z);
        } else {
            let z = dual
                .as_ref()
                .expect("bushes exist only when q > 0")
                .sample(rng);
            cur.grow(z)?;
            bush_size[id as usize] += z as usize;
            if bush_size[id as usize] > max_bush {
                return Err(TreeError::BushBudget(max_bush));
            }
            owner.extend(std::iter::repeat_n(id, z as usize));
            counts.push(z);
        }
        v += 1;
    }
    let tree = Tree::from_child_counts(counts, Some(depth_cap))?;
    let flags = owner.iter().map(|&o| o == BACKBONE).collect();
    let marks = BackboneMarks::from_flags(&tree, flags)?;
    Ok((tree, marks))
}

/// How the spine vertices draw their child counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpineLaw {
    /// Spine vertices draw from the offspring law itself and the next spine
    /// vertex is a uniform child: a GW tree with a path chosen by uniform
    /// child selection at each step.
    UniformChild,
    /// Spine vertices draw from the size-biased law k p_k / mu: the tree
    /// reweighted by Z_n / mu^n with a uniformly chosen generation-n vertex.
    SizeBiased,
}

/// A tree with a distinguished non-backtracking path from the root.
#[derive(Debug, Clone, PartialEq)]
pub struct SpineSample {
    pub tree: Tree,
    /// v_0 = root, ..., v_n.
    pub spine: Vec<NodeId>,
}

/// Tree with a spine of length `n`, expanded to generation `depth_cap >= n`.
///
/// Off-spine vertices draw from `dist`; spine vertices draw according to
/// `law` and pass the spine to a uniformly chosen child.
pub fn sample_spine<R: Rng + ?Sized>(
    dist: &OffspringDist,
    n: u32,
    depth_cap: u32,
    law: SpineLaw,
    max_nodes: usize,
    rng: &mut R,
) -> Result<SpineSample> {
    if dist.p_zero() > 0.0 {
        return Err(TreeError::SpineNeedsLeafless);
    }
    if n == 0 || depth_cap < n {
        return Err(TreeError::InvalidArgument(format!(
            "need 1 <= n <= depth_cap, got n={n}, cap={depth_cap}"
        )));
    }
    let biased = match law {
        SpineLaw::UniformChild => None,
        SpineLaw::SizeBiased => {
            let mu = dist.mean();
            let pairs: Vec<(u32, f64)> = dist
                .support()
                .iter()
                .map(|&k| (k, k as f64 * dist.p(k) / mu))
                .collect();
            let total: f64 = pairs.iter().map(|p| p.1).sum();
            let pairs: Vec<(u32, f64)> = pairs.into_iter().map(|(k, p)| (k, p / total)).collect();
            Some(
                OffspringDist::from_pairs(&pairs)
                    .map_err(|e| TreeError::InvalidArgument(e.to_string()))?,
            )
        }
    };
    let mut counts = Vec::new();
    let mut spine = vec![0u32];
    let mut cur = LevelCursor::new(max_nodes);
    let mut v = 0;
    while v < cur.len {
        let depth = cur.enter(v);
        let on_spine = depth < n && spine.last() == Some(&(v as u32));
        let z = if depth >= depth_cap {
            0
        } else if on_spine {
            biased.as_ref().unwrap_or(dist).sample(rng)
        } else {
            dist.sample(rng)
        };
        let first = cur.grow(z)?;
        if on_spine {
            spine.push((first + rng.random_range(0..z as usize)) as u32);
        }
        counts.push(z);
        v += 1;
    }
    let tree = Tree::from_child_counts(counts, Some(depth_cap))?;
    Ok(SpineSample { tree, spine })
}
