use rayon::prelude::*;

use super::{KTree, TreeNode};
use crate::error::{Error, Result};
use crate::kmeans::{kmeans, nearest_to_centroid, Init, KMeansConfig};
use crate::vecstore::{EmbeddingSet, ItemId, Subset};

/// Child counts are stored as one byte in the tree file.
pub const MAX_BRANCHING: usize = u8::MAX as usize;
pub const MAX_REPRESENTATIVES: usize = 5;

/// Member sets at least this large build their subtrees in parallel.
const PARALLEL_MEMBERS: usize = 2048;

#[derive(Debug, Clone, PartialEq)]
pub struct TreeConfig {
    pub branching: usize,
    pub leaf_capacity: usize,
    /// Representatives attached to each internal node, 0..=5.
    pub rep_count: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
    pub init: Init,
}

impl TreeConfig {
    pub fn new(branching: usize) -> Self {
        Self {
            branching,
            leaf_capacity: 16,
            rep_count: 3,
            max_iter: 50,
            tol: 1e-4,
            seed: 0,
            init: Init::KMeansPlusPlus,
        }
    }

    pub fn kmeans_config(&self, seed: u64) -> KMeansConfig {
        KMeansConfig {
            k: self.branching,
            max_iter: self.max_iter,
            tol: self.tol,
            seed,
            init: self.init,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.branching < 2 || self.branching > MAX_BRANCHING {
            return Err(Error::invalid(format!(
                "branching must be in 2..={MAX_BRANCHING}, got {}",
                self.branching
            )));
        }
        if self.leaf_capacity == 0 {
            return Err(Error::invalid("leaf_capacity must be at least 1"));
        }
        if self.rep_count > MAX_REPRESENTATIVES {
            return Err(Error::invalid(format!(
                "rep_count must be in 0..={MAX_REPRESENTATIVES}, got {}",
                self.rep_count
            )));
        }
        self.kmeans_config(self.seed).validate()
    }
}

/// Seed for the `index`-th child of a node seeded with `parent` (splitmix64 finalizer).
pub(crate) fn child_seed(parent: u64, index: u64) -> u64 {
    let mut z = parent ^ (index.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn build_tree(embeddings: &EmbeddingSet, config: &TreeConfig) -> Result<KTree> {
    config.validate()?;
    if embeddings.is_empty() {
        return Err(Error::invalid("cannot build a tree over an empty embedding set"));
    }
    if embeddings.len() > u32::MAX as usize {
        return Err(Error::invalid("item count exceeds u32 range"));
    }
    let ids: Vec<ItemId> = (0..embeddings.len() as ItemId).collect();
    let centroid = mean_of(embeddings, &ids);
    let root = build_node(embeddings, config, ids, centroid, config.seed)?;
    Ok(KTree {
        depth: root.depth(),
        root,
        branching: config.branching,
        leaf_capacity: config.leaf_capacity,
        dim: embeddings.dim(),
        item_count: embeddings.len(),
        rep_count: config.rep_count,
    })
}

fn mean_of(set: &EmbeddingSet, ids: &[ItemId]) -> Vec<f32> {
    let mut acc = vec![0f64; set.dim()];
    for &id in ids {
        for (a, &x) in acc.iter_mut().zip(set.vector(id)) {
            *a += x as f64;
        }
    }
    let n = ids.len() as f64;
    acc.into_iter().map(|a| (a / n) as f32).collect()
}

fn all_identical(set: &EmbeddingSet, ids: &[ItemId]) -> bool {
    let first = set.vector(ids[0]);
    ids[1..].iter().all(|&id| set.vector(id) == first)
}

/// Splits `ids` into non-empty clusters, each paired with its centroid.
fn split(
    set: &EmbeddingSet,
    config: &TreeConfig,
    ids: &[ItemId],
    seed: u64,
) -> Result<Vec<(Vec<ItemId>, Vec<f32>)>> {
    let clustering = kmeans(&Subset::new(set, ids), &config.kmeans_config(seed))?;
    let groups = clustering
        .members()
        .into_iter()
        .enumerate()
        .filter(|(_, m)| !m.is_empty())
        .map(|(c, m)| {
            let members = m.into_iter().map(|pos| ids[pos]).collect();
            (members, clustering.centroid(c).to_vec())
        })
        .collect();
    Ok(groups)
}

fn build_node(
    set: &EmbeddingSet,
    config: &TreeConfig,
    ids: Vec<ItemId>,
    centroid: Vec<f32>,
    seed: u64,
) -> Result<TreeNode> {
    if ids.len() <= config.leaf_capacity || all_identical(set, &ids) {
        return Ok(TreeNode::Leaf { member_ids: ids });
    }
    let mut groups = split(set, config, &ids, seed)?;
    if groups.len() < 2 {
        // One retry with a fresh seed before giving up on this member set.
        groups = split(set, config, &ids, child_seed(seed, u64::MAX))?;
        if groups.len() < 2 {
            return Ok(TreeNode::Leaf { member_ids: ids });
        }
    }

    let build_child = |(index, (members, child_centroid)): (usize, (Vec<ItemId>, Vec<f32>))| {
        build_node(set, config, members, child_centroid, child_seed(seed, index as u64))
    };
    let children: Vec<TreeNode> = if ids.len() >= PARALLEL_MEMBERS {
        groups.into_par_iter().enumerate().map(build_child).collect::<Result<_>>()?
    } else {
        groups.into_iter().enumerate().map(build_child).collect::<Result<_>>()?
    };

    let rep_ids = if config.rep_count > 0 {
        nearest_to_centroid(set, &ids, &centroid, config.rep_count)?
    } else {
        Vec::new()
    };
    Ok(TreeNode::Internal {
        centroid,
        children,
        rep_ids,
    })
}
