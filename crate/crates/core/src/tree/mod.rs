//! Rooted trees stored as a level-order arena.
//!
//! Node 0 is the root. Nodes are numbered breadth first, so the children of
//! every node form a contiguous index range and every generation is a
//! contiguous block; the nodes within depth `L` are exactly the prefix
//! `0..level_end(L)`. Dynamic programs over "the tree truncated at depth L"
//! therefore sweep a prefix of flat arrays.
//!
//! A tree may be a depth-capped sample of an infinite tree: nodes at
//! `depth_cap` were never expanded and are called frontier nodes. Their
//! child count is unknown, which is different from being a leaf.

use std::fmt;
use std::ops::Range;

use thiserror::Error;

mod backbone;
mod enumerate;
mod sample;
mod stats;

pub use backbone::{backbone_decompose, BackboneMarks, Mark};
pub use enumerate::{all_rooted_trees, rooted_trees_with, Shape};
pub use sample::{
    sample_gw, sample_gw_survival, sample_spine, SpineLaw, SpineSample, DEFAULT_MAX_NODES,
};
pub use stats::{path_products, trap_stats, PathProducts, TrapMode, TrapStats};

pub type NodeId = u32;
const NO_PARENT: u32 = u32::MAX;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TreeError {
    #[error("node budget of {0} exceeded")]
    NodeBudget(usize),
    #[error("bush-size cap of {0} exceeded")]
    BushBudget(usize),
    #[error("tree has no vertex at depth cap {0}: extinct before the cap")]
    Extinct(u32),
    #[error("offspring law has P(Z=0) > 0; the spine construction needs a child at every vertex")]
    SpineNeedsLeafless,
    #[error("offspring law is not supercritical")]
    NotSupercritical,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("malformed tree text at line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

pub type Result<T> = std::result::Result<T, TreeError>;

/// A rooted tree in level order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tree {
    parent: Vec<u32>,
    first_child: Vec<u32>,
    child_count: Vec<u32>,
    depth: Vec<u32>,
    /// `level_start[d]..level_start[d + 1]` are the depth-`d` nodes.
    level_start: Vec<u32>,
    depth_cap: Option<u32>,
}

impl Tree {
    /// Builds a tree from the child counts of its nodes listed in level order.
    ///
    /// `depth_cap = None` marks a fully specified finite tree. With a cap,
    /// nodes at the cap must have zero recorded children and no node may lie
    /// deeper.
    pub fn from_child_counts(counts: Vec<u32>, depth_cap: Option<u32>) -> Result<Self> {
        let n = counts.len();
        if n == 0 {
            return Err(TreeError::InvalidArgument("a tree needs a root".into()));
        }
        let total: u64 = 1 + counts.iter().map(|&c| c as u64).sum::<u64>();
        if total != n as u64 {
            return Err(TreeError::InvalidArgument(format!(
                "child counts describe {total} nodes but {n} were listed"
            )));
        }
        if n as u64 >= NO_PARENT as u64 {
            return Err(TreeError::NodeBudget(NO_PARENT as usize - 1));
        }
        let mut parent = vec![NO_PARENT; n];
        let mut first_child = vec![0u32; n];
        let mut depth = vec![0u32; n];
        let mut level_start = vec![0u32];
        let mut next = 1u32;
        for v in 0..n {
            if v as u32 >= next {
                return Err(TreeError::InvalidArgument(
                    "child counts are not in level order".into(),
                ));
            }
            first_child[v] = next;
            for c in next..next + counts[v] {
                parent[c as usize] = v as u32;
                depth[c as usize] = depth[v] + 1;
            }
            next += counts[v];
        }
        for v in 1..n {
            if depth[v] != depth[v - 1] {
                level_start.push(v as u32);
            }
        }
        level_start.push(n as u32);
        let tree = Tree {
            parent,
            first_child,
            child_count: counts,
            depth,
            level_start,
            depth_cap,
        };
        if let Some(cap) = depth_cap {
            if tree.height() > cap {
                return Err(TreeError::InvalidArgument(format!(
                    "node at depth {} exceeds cap {cap}",
                    tree.height()
                )));
            }
        }
        Ok(tree)
    }

    /// Builds a tree from a parent array in any numbering (`None` marks the root).
    ///
    /// The result is renumbered in level order; siblings keep the relative
    /// order of their original indices.
    pub fn from_parents(parents: &[Option<usize>], depth_cap: Option<u32>) -> Result<Self> {
        let n = parents.len();
        let roots: Vec<usize> = (0..n).filter(|&v| parents[v].is_none()).collect();
        if roots.len() != 1 {
            return Err(TreeError::InvalidArgument(format!(
                "expected one root, found {}",
                roots.len()
            )));
        }
        let mut kids: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (v, p) in parents.iter().enumerate() {
            if let Some(p) = *p {
                if p >= n {
                    return Err(TreeError::InvalidArgument(format!(
                        "parent index {p} out of range"
                    )));
                }
                kids[p].push(v);
            }
        }
        let mut order = vec![roots[0]];
        let mut i = 0;
        while i < order.len() {
            let v = order[i];
            order.extend_from_slice(&kids[v]);
            i += 1;
        }
        if order.len() != n {
            return Err(TreeError::InvalidArgument(
                "parent array contains a cycle".into(),
            ));
        }
        Self::from_child_counts(
            order.iter().map(|&v| kids[v].len() as u32).collect(),
            depth_cap,
        )
    }

    /// A path 0 - 1 - ... - `len` with the cap at the last node.
    pub fn half_line(len: u32) -> Self {
        let mut counts = vec![1; len as usize];
        counts.push(0);
        Self::from_child_counts(counts, Some(len)).expect("valid by construction")
    }

    /// Complete `arity`-ary tree with its cap at depth `cap`.
    pub fn complete(arity: u32, cap: u32) -> Self {
        let mut counts = Vec::new();
        let mut width = 1usize;
        for _ in 0..cap {
            counts.extend(std::iter::repeat_n(arity, width));
            width *= arity as usize;
        }
        counts.extend(std::iter::repeat_n(0, width));
        Self::from_child_counts(counts, Some(cap)).expect("valid by construction")
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn root(&self) -> NodeId {
        0
    }

    pub fn parent(&self, v: NodeId) -> Option<NodeId> {
        let p = self.parent[v as usize];
        (p != NO_PARENT).then_some(p)
    }

    pub fn children(&self, v: NodeId) -> Range<NodeId> {
        let f = self.first_child[v as usize];
        f..f + self.child_count[v as usize]
    }

    /// Number of children.
    pub fn deg(&self, v: NodeId) -> u32 {
        self.child_count[v as usize]
    }

    pub fn depth(&self, v: NodeId) -> u32 {
        self.depth[v as usize]
    }

    pub fn depth_cap(&self) -> Option<u32> {
        self.depth_cap
    }

    /// Depth of the deepest node.
    pub fn height(&self) -> u32 {
        (self.level_start.len() - 2) as u32
    }

    /// Nodes at depth `d` (empty beyond the height).
    pub fn level(&self, d: u32) -> Range<NodeId> {
        let d = d as usize;
        if d + 1 >= self.level_start.len() {
            return self.len() as u32..self.len() as u32;
        }
        self.level_start[d]..self.level_start[d + 1]
    }

    /// Number of nodes of depth at most `d`.
    pub fn level_end(&self, d: u32) -> usize {
        let d = d as usize + 1;
        if d >= self.level_start.len() {
            self.len()
        } else {
            self.level_start[d] as usize
        }
    }

    /// Whether `v` sits at the cap and was never expanded.
    pub fn is_frontier(&self, v: NodeId) -> bool {
        self.depth_cap == Some(self.depth(v))
    }

    /// Whether `v` is known to have no children.
    pub fn is_leaf(&self, v: NodeId) -> bool {
        self.deg(v) == 0 && !self.is_frontier(v)
    }

    pub fn is_ancestor(&self, a: NodeId, v: NodeId) -> bool {
        let mut v = v;
        while self.depth(v) > self.depth(a) {
            v = self.parent[v as usize];
        }
        v == a
    }

    /// Root-to-`v` path, root first.
    pub fn path_from_root(&self, v: NodeId) -> Vec<NodeId> {
        let mut path = vec![v];
        let mut u = v;
        while let Some(p) = self.parent(u) {
            path.push(p);
            u = p;
        }
        path.reverse();
        path
    }

    /// Sizes of all subtrees, each counting its own root.
    pub fn subtree_sizes(&self) -> Vec<u64> {
        let mut size = vec![1u64; self.len()];
        for v in (1..self.len()).rev() {
            let p = self.parent[v] as usize;
            size[p] += size[v];
        }
        size
    }

    /// Heights of all subtrees (0 for a childless node).
    pub fn subtree_heights(&self) -> Vec<u32> {
        let mut h = vec![0u32; self.len()];
        for v in (1..self.len()).rev() {
            let p = self.parent[v] as usize;
            h[p] = h[p].max(h[v] + 1);
        }
        h
    }

    /// Child counts in level order; together with the cap this determines the tree.
    pub fn child_counts(&self) -> &[u32] {
        &self.child_count
    }

    /// Parses the text form written by [`Display`](fmt::Display).
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(TreeError::Parse {
            line: 1,
            reason: "empty input".into(),
        })?;
        let mut fields = header.split_whitespace();
        let bad = |line: usize, reason: &str| TreeError::Parse {
            line,
            reason: reason.into(),
        };
        let count: usize = fields
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(1, "expected node count"))?;
        let cap = match fields.next() {
            Some("none") => None,
            Some(s) => Some(
                s.parse::<u32>()
                    .map_err(|_| bad(1, "expected depth cap or 'none'"))?,
            ),
            None => return Err(bad(1, "expected depth cap")),
        };
        let mut parents = Vec::with_capacity(count);
        for (i, line) in lines {
            let value: i64 = line
                .trim()
                .parse()
                .map_err(|_| bad(i + 1, "expected a parent index"))?;
            parents.push(if value < 0 {
                None
            } else {
                Some(value as usize)
            });
        }
        if parents.len() != count {
            return Err(bad(
                count + 1,
                "node count does not match the number of parent lines",
            ));
        }
        Self::from_parents(&parents, cap)
    }
}

impl fmt::Display for Tree {
    /// Header `<node count> <depth cap | none>`, then one parent index per
    /// node in level order (`-1` for the root).
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.depth_cap {
            Some(c) => writeln!(f, "{} {}", self.len(), c)?,
            None => writeln!(f, "{} none", self.len())?,
        }
        for v in 0..self.len() as u32 {
            match self.parent(v) {
                Some(p) => writeln!(f, "{p}")?,
                None => writeln!(f, "-1")?,
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_order_layout() {
        let t = Tree::from_child_counts(vec![3, 2, 0, 0, 0, 0], None).unwrap();
        assert_eq!(t.children(0), 1..4);
        assert_eq!(t.children(1), 4..6);
        assert_eq!(t.level(2), 4..6);
        assert_eq!(t.level_end(1), 4);
        assert_eq!(t.height(), 2);
        assert_eq!(t.path_from_root(5), vec![0, 1, 5]);
        assert_eq!(t.subtree_sizes(), vec![6, 3, 1, 1, 1, 1]);
        assert!(t.is_leaf(2) && !t.is_frontier(2));
    }

    #[test]
    fn deterministic_shapes() {
        assert_eq!(Tree::half_line(5).len(), 6);
        assert_eq!(Tree::complete(2, 3).len(), 15);
        assert!(Tree::half_line(5).is_frontier(5));
    }

    #[test]
    fn rejects_inconsistent_counts() {
        assert!(Tree::from_child_counts(vec![2, 0], None).is_err());
        assert!(Tree::from_child_counts(vec![1, 1, 0], Some(1)).is_err());
        assert!(Tree::from_parents(&[None, None], None).is_err());
        assert!(Tree::from_parents(&[None, Some(2), Some(1)], None).is_err());
    }

    #[test]
    fn text_round_trip() {
        let t = Tree::complete(3, 2);
        let text = t.to_string();
        let back = Tree::parse(&text).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.to_string(), text);
        let finite = Tree::from_parents(&[Some(2), None, Some(1), Some(1)], None).unwrap();
        assert_eq!(finite.child_counts(), &[2, 1, 0, 0]);
        assert_eq!(Tree::parse(&finite.to_string()).unwrap(), finite);
        assert!(Tree::parse("3 none\n-1\n0\n").is_err());
    }
}
