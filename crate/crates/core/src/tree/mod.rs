//! Hierarchical k-means tree.
//!
//! Internal nodes carry the k-means centroid of everything below them and,
//! optionally, up to five representative items nearest that centroid. Leaves
//! hold item ids; together they partition the corpus.

mod build;
mod format;

use std::collections::BTreeMap;

pub use build::{build_tree, TreeConfig, MAX_BRANCHING, MAX_REPRESENTATIVES};
pub use format::{decode_tree, deserialize_tree, encode_tree, serialize_tree};

use crate::vecstore::ItemId;

#[derive(Debug, Clone, PartialEq)]
pub enum TreeNode {
    Internal {
        centroid: Vec<f32>,
        children: Vec<TreeNode>,
        rep_ids: Vec<ItemId>,
    },
    Leaf {
        member_ids: Vec<ItemId>,
    },
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        matches!(self, TreeNode::Leaf { .. })
    }

    pub fn children(&self) -> &[TreeNode] {
        match self {
            TreeNode::Internal { children, .. } => children,
            TreeNode::Leaf { .. } => &[],
        }
    }

    /// Levels of internal nodes between this node and its deepest leaf.
    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Internal { children, .. } => {
                1 + children.iter().map(TreeNode::depth).max().unwrap_or(0)
            }
        }
    }

    /// All item ids stored in leaves below this node, in leaf order.
    pub fn members(&self) -> Vec<ItemId> {
        let mut out = Vec::new();
        let mut stack = vec![self];
        while let Some(node) = stack.pop() {
            match node {
                TreeNode::Leaf { member_ids } => out.extend_from_slice(member_ids),
                TreeNode::Internal { children, .. } => stack.extend(children.iter().rev()),
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KTree {
    pub root: TreeNode,
    pub branching: usize,
    pub leaf_capacity: usize,
    pub dim: usize,
    pub item_count: usize,
    /// Representatives requested per internal node at build time (0 = none).
    pub rep_count: usize,
    pub depth: usize,
}

impl KTree {
    /// Pre-order iterator over all nodes.
    pub fn nodes(&self) -> impl Iterator<Item = &TreeNode> {
        let mut stack = vec![&self.root];
        std::iter::from_fn(move || {
            let node = stack.pop()?;
            stack.extend(node.children().iter().rev());
            Some(node)
        })
    }

    pub fn leaves(&self) -> impl Iterator<Item = &[ItemId]> {
        self.nodes().filter_map(|n| match n {
            TreeNode::Leaf { member_ids } => Some(member_ids.as_slice()),
            TreeNode::Internal { .. } => None,
        })
    }

    /// Largest number of internal nodes found on any single level.
    pub fn widest_internal_level(&self) -> usize {
        let mut level = vec![&self.root];
        let mut widest = 0;
        while !level.is_empty() {
            widest = widest.max(level.iter().filter(|n| !n.is_leaf()).count());
            level = level.iter().flat_map(|n| n.children()).collect();
        }
        widest
    }

    pub fn stats(&self) -> TreeStats {
        tree_stats(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeStats {
    pub node_count: usize,
    pub leaf_count: usize,
    pub depth: usize,
    pub min_leaf_size: usize,
    pub max_leaf_size: usize,
    pub mean_leaf_size: f64,
    /// Number of internal nodes per child count.
    pub branching_histogram: BTreeMap<usize, usize>,
    /// Sum of all leaf sizes; equals the item count for a valid tree.
    pub total_members: usize,
}

pub fn tree_stats(tree: &KTree) -> TreeStats {
    let mut stats = TreeStats {
        node_count: 0,
        leaf_count: 0,
        depth: tree.root.depth(),
        min_leaf_size: usize::MAX,
        max_leaf_size: 0,
        mean_leaf_size: 0.0,
        branching_histogram: BTreeMap::new(),
        total_members: 0,
    };
    for node in tree.nodes() {
        stats.node_count += 1;
        match node {
            TreeNode::Leaf { member_ids } => {
                stats.leaf_count += 1;
                stats.min_leaf_size = stats.min_leaf_size.min(member_ids.len());
                stats.max_leaf_size = stats.max_leaf_size.max(member_ids.len());
                stats.total_members += member_ids.len();
            }
            TreeNode::Internal { children, .. } => {
                *stats.branching_histogram.entry(children.len()).or_default() += 1;
            }
        }
    }
    stats.mean_leaf_size = stats.total_members as f64 / stats.leaf_count as f64;
    stats
}

impl std::fmt::Display for TreeStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "nodes\t{}", self.node_count)?;
        writeln!(f, "leaves\t{}", self.leaf_count)?;
        writeln!(f, "depth\t{}", self.depth)?;
        writeln!(f, "leaf_size_min\t{}", self.min_leaf_size)?;
        writeln!(f, "leaf_size_max\t{}", self.max_leaf_size)?;
        writeln!(f, "leaf_size_mean\t{:.3}", self.mean_leaf_size)?;
        writeln!(f, "members\t{}", self.total_members)?;
        let hist: Vec<String> = self
            .branching_histogram
            .iter()
            .map(|(k, v)| format!("{k}:{v}"))
            .collect();
        write!(f, "branching\t{}", hist.join(","))
    }
}
