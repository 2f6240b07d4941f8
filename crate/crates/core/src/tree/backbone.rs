//! Backbone/bush decomposition.
//!
//! Backbone vertices lie on infinite rays; bushes are the finite subtrees
//! hanging off them. On a depth-capped sample "lies on an infinite ray" is
//! replaced by "has a descendant at the cap".

use super::{NodeId, Result, Tree, TreeError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mark {
    Backbone,
    Bush,
}

/// Per-vertex backbone data. Entries that only make sense on one kind of
/// vertex hold 0 on the other kind.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneMarks {
    pub mark: Vec<Mark>,
    /// Backbone children of a backbone vertex.
    pub z_i: Vec<u32>,
    /// Bush children of a backbone vertex.
    pub z_f: Vec<u32>,
    /// |T^f(v)| / Z^i(v), where T^f(v) is v together with its bushes.
    /// NaN for backbone vertices at the cap, which have no recorded children.
    pub r: Vec<f64>,
    /// Largest bush rooted at a child of a backbone vertex (0 if none).
    pub s: Vec<u64>,
    /// Distance from a bush vertex to the backbone (0 on the backbone).
    pub dist_to_backbone: Vec<u32>,
    /// Per level n: height of the tallest T^f(v) over backbone v at level n.
    pub bush_height: Vec<u32>,
}

impl BackboneMarks {
    /// Completes the marks from a backbone indicator.
    pub fn from_flags(tree: &Tree, flags: Vec<bool>) -> Result<Self> {
        let n = tree.len();
        if flags.len() != n || !flags[0] {
            return Err(TreeError::InvalidArgument(
                "backbone must contain the root".into(),
            ));
        }
        for v in 1..n as NodeId {
            let p = tree.parent(v).expect("non-root") as usize;
            if flags[v as usize] && !flags[p] {
                return Err(TreeError::InvalidArgument(
                    "backbone is not closed under parents".into(),
                ));
            }
        }
        let size = tree.subtree_sizes();
        let height = tree.subtree_heights();
        let mut z_i = vec![0u32; n];
        let mut z_f = vec![0u32; n];
        let mut r = vec![0.0; n];
        let mut s = vec![0u64; n];
        let mut dist = vec![0u32; n];
        let mut bush_height = vec![0u32; tree.height() as usize + 1];
        for v in 0..n as NodeId {
            let vi = v as usize;
            if !flags[vi] {
                let p = tree.parent(v).expect("root is backbone") as usize;
                dist[vi] = dist[p] + 1;
                continue;
            }
            let mut finite_size = 1u64;
            let mut tallest = 0u32;
            for c in tree.children(v) {
                let ci = c as usize;
                if flags[ci] {
                    z_i[vi] += 1;
                } else {
                    z_f[vi] += 1;
                    finite_size += size[ci];
                    s[vi] = s[vi].max(size[ci]);
                    tallest = tallest.max(height[ci] + 1);
                }
            }
            r[vi] = if z_i[vi] == 0 {
                f64::NAN
            } else {
                finite_size as f64 / z_i[vi] as f64
            };
            let level = tree.depth(v) as usize;
            bush_height[level] = bush_height[level].max(tallest);
        }
        let mark = flags
            .iter()
            .map(|&b| if b { Mark::Backbone } else { Mark::Bush })
            .collect();
        Ok(BackboneMarks {
            mark,
            z_i,
            z_f,
            r,
            s,
            dist_to_backbone: dist,
            bush_height,
        })
    }

    pub fn is_backbone(&self, v: NodeId) -> bool {
        self.mark[v as usize] == Mark::Backbone
    }

    pub fn is_backbone_all(&self) -> bool {
        self.mark.iter().all(|&m| m == Mark::Backbone)
    }

    pub fn bush_count(&self) -> usize {
        self.mark.iter().filter(|&&m| m == Mark::Bush).count()
    }

    /// Membership in the set of backbone vertices where the backbone branches:
    /// the root and every backbone vertex with at least two backbone children.
    pub fn is_branching(&self, v: NodeId) -> bool {
        v == 0 || (self.is_backbone(v) && self.z_i[v as usize] >= 2)
    }
}

/// Marks by the cap proxy: a vertex is backbone iff it has a descendant at the cap.
pub fn backbone_decompose(tree: &Tree) -> Result<BackboneMarks> {
    let cap = tree
        .depth_cap()
        .ok_or_else(|| TreeError::InvalidArgument("backbone proxy needs a depth cap".into()))?;
    let mut reach = vec![false; tree.len()];
    for v in tree.level(cap) {
        reach[v as usize] = true;
    }
    for v in (1..tree.len()).rev() {
        if reach[v] {
            reach[tree.parent(v as NodeId).expect("non-root") as usize] = true;
        }
    }
    if !reach[0] {
        return Err(TreeError::Extinct(cap));
    }
    BackboneMarks::from_flags(tree, reach)
}
