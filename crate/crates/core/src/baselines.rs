//! Exact top-n references: compute-all scanning and a median-split k-d tree.
//!
//! Both rank euclidean candidates by squared distance with the lower id
//! winning ties, the same rule the tree search uses, so their outputs can be
//! compared id for id.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::scorers::{score_pairs, PairScorer};
use crate::search::{Metric, SearchResult, TopN};
use crate::vecstore::{squared_euclidean, EmbeddingSet, ItemId, ItemTable};

/// Scores every non-excluded item in id order.
pub fn brute_force_topn(
    embeddings: &EmbeddingSet,
    query: &[f32],
    metric: Metric,
    top_n: usize,
    exclude_ids: &BTreeSet<ItemId>,
) -> Result<SearchResult> {
    if top_n == 0 {
        return Err(Error::invalid("top_n must be at least 1"));
    }
    metric.check_query(query, embeddings.dim())?;
    let mut pool = TopN::new(top_n);
    let mut evals = 0u64;
    for (id, v) in embeddings.rows().enumerate() {
        let id = id as ItemId;
        if exclude_ids.contains(&id) {
            continue;
        }
        let (score, key) = metric.score(query, v);
        evals += 1;
        pool.push(key, id, score);
    }
    Ok(SearchResult {
        ranked: pool.into_hits(),
        eval_count: evals,
        nodes_visited: 0,
    })
}

/// Scores the query text against every non-excluded item, higher first.
pub fn exhaustive_pairwise_topn(
    items: &ItemTable,
    query_text: &str,
    scorer: &dyn PairScorer,
    top_n: usize,
    exclude_ids: &BTreeSet<ItemId>,
) -> Result<SearchResult> {
    if top_n == 0 {
        return Err(Error::invalid("top_n must be at least 1"));
    }
    let ids: Vec<ItemId> = items.iter().map(|(id, _)| id).filter(|id| !exclude_ids.contains(id)).collect();
    let pairs: Vec<(&str, &str)> = items
        .iter()
        .filter(|(id, _)| !exclude_ids.contains(id))
        .map(|(_, text)| (query_text, text))
        .collect();
    let scores = score_pairs(scorer, &pairs).map_err(|source| Error::Scorer {
        context: "exhaustive scan".into(),
        source,
    })?;
    let mut pool = TopN::new(top_n);
    for (&id, &score) in ids.iter().zip(&scores) {
        pool.push(-score, id, score);
    }
    Ok(SearchResult {
        ranked: pool.into_hits(),
        eval_count: scores.len() as u64,
        nodes_visited: 0,
    })
}

pub const DEFAULT_KD_LEAF_SIZE: usize = 8;

#[derive(Debug, Clone, PartialEq)]
enum KdNode {
    /// Left subtree holds coordinates `<= value` on `split_dim`, right holds `> value`.
    Split {
        split_dim: usize,
        value: f32,
        left: usize,
        right: usize,
    },
    /// Range into `KdTree::ids`.
    Leaf { start: usize, end: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct KdTree {
    nodes: Vec<KdNode>,
    ids: Vec<ItemId>,
    dim: usize,
    leaf_size: usize,
}

impl KdTree {
    pub fn build(embeddings: &EmbeddingSet, leaf_size: usize) -> Result<Self> {
        if leaf_size == 0 {
            return Err(Error::invalid("leaf_size must be at least 1"));
        }
        if embeddings.is_empty() {
            return Err(Error::invalid("cannot build a k-d tree over an empty set"));
        }
        let mut tree = KdTree {
            nodes: Vec::new(),
            ids: (0..embeddings.len() as ItemId).collect(),
            dim: embeddings.dim(),
            leaf_size,
        };
        tree.build_node(embeddings, 0, embeddings.len());
        Ok(tree)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Returns the index of the node built for `ids[start..end]`.
    fn build_node(&mut self, set: &EmbeddingSet, start: usize, end: usize) -> usize {
        let index = self.nodes.len();
        self.nodes.push(KdNode::Leaf { start, end });
        if end - start <= self.leaf_size {
            return index;
        }
        let slice = &mut self.ids[start..end];
        let (split_dim, spread) = widest_dimension(set, slice, self.dim);
        if spread <= 0.0 {
            // All points coincide; no hyperplane separates them.
            return index;
        }
        slice.sort_by(|&a, &b| {
            set.vector(a)[split_dim]
                .total_cmp(&set.vector(b)[split_dim])
                .then(a.cmp(&b))
        });
        let coord = |id: ItemId| set.vector(id)[split_dim];
        let mid = slice.len() / 2;
        let mut value = coord(slice[mid - 1]);
        let mut cut = slice.partition_point(|&id| coord(id) <= value);
        if cut == slice.len() {
            // Values tied at the top of the range; cut below the tie instead.
            cut = slice.partition_point(|&id| coord(id) < value);
            value = coord(slice[cut - 1]);
        }
        let left = self.build_node(set, start, start + cut);
        let right = self.build_node(set, start + cut, end);
        self.nodes[index] = KdNode::Split {
            split_dim,
            value,
            left,
            right,
        };
        index
    }

    fn search(
        &self,
        node: usize,
        set: &EmbeddingSet,
        query: &[f32],
        exclude: &BTreeSet<ItemId>,
        pool: &mut TopN,
        counters: &mut (u64, u64),
    ) {
        counters.1 += 1;
        match self.nodes[node] {
            KdNode::Leaf { start, end } => {
                for &id in &self.ids[start..end] {
                    if exclude.contains(&id) {
                        continue;
                    }
                    let sq = squared_euclidean(query, set.vector(id));
                    counters.0 += 1;
                    pool.push(sq, id, sq.sqrt());
                }
            }
            KdNode::Split {
                split_dim,
                value,
                left,
                right,
            } => {
                let diff = query[split_dim] as f64 - value as f64;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.search(near, set, query, exclude, pool, counters);
                // Any far-side point is at least |diff| away along split_dim.
                let bound = diff * diff;
                let prune = pool.worst_key().is_some_and(|(worst, _)| bound > worst);
                if !prune {
                    self.search(far, set, query, exclude, pool, counters);
                }
            }
        }
    }
}

fn widest_dimension(set: &EmbeddingSet, ids: &[ItemId], dim: usize) -> (usize, f64) {
    let mut lo = vec![f32::INFINITY; dim];
    let mut hi = vec![f32::NEG_INFINITY; dim];
    for &id in ids {
        for (d, &x) in set.vector(id).iter().enumerate() {
            lo[d] = lo[d].min(x);
            hi[d] = hi[d].max(x);
        }
    }
    let mut best = (0, f64::NEG_INFINITY);
    for d in 0..dim {
        let spread = hi[d] as f64 - lo[d] as f64;
        if spread > best.1 {
            best = (d, spread);
        }
    }
    best
}

pub fn kdtree_build(embeddings: &EmbeddingSet) -> Result<KdTree> {
    KdTree::build(embeddings, DEFAULT_KD_LEAF_SIZE)
}

/// Exact euclidean top-n by branch and bound. `eval_count` counts point
/// distances only, not hyperplane tests.
pub fn kdtree_topn(
    kdtree: &KdTree,
    embeddings: &EmbeddingSet,
    query: &[f32],
    metric: Metric,
    top_n: usize,
    exclude_ids: &BTreeSet<ItemId>,
) -> Result<SearchResult> {
    if metric != Metric::Euclidean {
        return Err(Error::UnsupportedMetric(format!("k-d tree search supports euclidean only, not {metric}")));
    }
    if top_n == 0 {
        return Err(Error::invalid("top_n must be at least 1"));
    }
    if embeddings.len() != kdtree.len() || embeddings.dim() != kdtree.dim {
        return Err(Error::Consistency("embedding set differs from the one the k-d tree was built on".into()));
    }
    metric.check_query(query, kdtree.dim)?;
    let mut pool = TopN::new(top_n);
    let mut counters = (0u64, 0u64);
    kdtree.search(0, embeddings, query, exclude_ids, &mut pool, &mut counters);
    Ok(SearchResult {
        ranked: pool.into_hits(),
        eval_count: counters.0,
        nodes_visited: counters.1,
    })
}
