//! Exhaustive generation of unlabeled rooted trees.
//!
//! A rooted tree is a multiset of child subtrees. Listing each multiset as a
//! non-increasing sequence of (size, index) keys into the tables of smaller
//! trees yields every isomorphism class exactly once.

use super::Tree;

/// A rooted tree as nested child lists.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Shape(pub Vec<Shape>);

impl Shape {
    pub fn size(&self) -> usize {
        1 + self.0.iter().map(Shape::size).sum::<usize>()
    }

    /// The finite tree with this shape (no depth cap).
    pub fn to_tree(&self) -> Tree {
        let mut counts = Vec::with_capacity(self.size());
        let mut queue = std::collections::VecDeque::from([self]);
        while let Some(s) = queue.pop_front() {
            counts.push(s.0.len() as u32);
            queue.extend(s.0.iter());
        }
        Tree::from_child_counts(counts, None).expect("shapes are well formed")
    }
}

type Key = (usize, usize);

/// All rooted trees with exactly `size` vertices, for each size in `1..=max_size`.
///
/// `result[s - 1]` lists the trees with `s` vertices.
pub fn rooted_trees_with(max_size: usize) -> Vec<Vec<Shape>> {
    let mut by_size: Vec<Vec<Shape>> = Vec::new();
    for size in 1..=max_size {
        let mut out = Vec::new();
        let mut stack = Vec::new();
        multisets(
            &by_size,
            size - 1,
            (usize::MAX, usize::MAX),
            &mut stack,
            &mut out,
        );
        by_size.push(out);
    }
    by_size
}

/// All rooted trees with at most `max_size` vertices.
pub fn all_rooted_trees(max_size: usize) -> Vec<Shape> {
    rooted_trees_with(max_size).into_iter().flatten().collect()
}

fn multisets(
    by_size: &[Vec<Shape>],
    remaining: usize,
    max_key: Key,
    stack: &mut Vec<Key>,
    out: &mut Vec<Shape>,
) {
    if remaining == 0 {
        let children = stack
            .iter()
            .map(|&(s, i)| by_size[s - 1][i].clone())
            .collect();
        out.push(Shape(children));
        return;
    }
    for s in (1..=remaining.min(max_key.0)).rev() {
        let top = if s == max_key.0 {
            max_key.1 + 1
        } else {
            by_size[s - 1].len()
        };
        for i in (0..top.min(by_size[s - 1].len())).rev() {
            stack.push((s, i));
            multisets(by_size, remaining - s, (s, i), stack, out);
            stack.pop();
        }
    }
}
