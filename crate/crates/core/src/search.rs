//! Level-synchronous beam search over a [`KTree`].
//!
//! The beam starts at the root. Each step expands every child of every beam
//! node: internal children are scored once (centroid in vector mode, best
//! representative in pairwise mode) and compete for `beam_width` slots; leaf
//! children are consumed immediately, every member scored into a running
//! top-`n` pool. The search ends when no internal node survives.
//!
//! `eval_count` is the exact number of distance or pair-score evaluations.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tree::{KTree, TreeNode};
use crate::scorers::{score_pairs, PairScorer};
use crate::vecstore::{cosine_unchecked, dot, squared_euclidean, EmbeddingSet, ItemId, ItemTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// Higher is better.
    Cosine,
    /// Lower is better.
    Euclidean,
}

impl Metric {
    /// Reported score and an ordering key where smaller is better.
    ///
    /// Euclidean candidates are ordered by squared distance so that every
    /// index ranks ties identically. Cosine against a zero vector scores 0.
    #[inline]
    pub(crate) fn score(self, query: &[f32], v: &[f32]) -> (f64, f64) {
        match self {
            Metric::Cosine => {
                let c = cosine_unchecked(query, v).unwrap_or(0.0);
                (c, -c)
            }
            Metric::Euclidean => {
                let sq = squared_euclidean(query, v);
                (sq.sqrt(), sq)
            }
        }
    }

    pub(crate) fn check_query(self, query: &[f32], dim: usize) -> Result<()> {
        if query.len() != dim {
            return Err(Error::invalid(format!(
                "query has dim {} but index has dim {dim}",
                query.len()
            )));
        }
        if query.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("query contains non-finite values"));
        }
        if self == Metric::Cosine && dot(query, query) == 0.0 {
            return Err(Error::Domain("cosine search with a zero-norm query".into()));
        }
        Ok(())
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "euclidean" => Ok(Metric::Euclidean),
            other => Err(Error::invalid(format!("unknown metric {other:?}"))),
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Metric::Cosine => "cosine",
            Metric::Euclidean => "euclidean",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchParams {
    pub beam_width: usize,
    pub top_n: usize,
    pub metric: Metric,
    pub exclude_ids: BTreeSet<ItemId>,
}

impl Default for SearchParams {
    fn default() -> Self {
        Self {
            beam_width: 20,
            top_n: 20,
            metric: Metric::Cosine,
            exclude_ids: BTreeSet::new(),
        }
    }
}

impl SearchParams {
    pub fn excluding(mut self, ids: impl IntoIterator<Item = ItemId>) -> Self {
        self.exclude_ids.extend(ids);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 {
            return Err(Error::invalid("beam_width must be at least 1"));
        }
        if self.top_n == 0 {
            return Err(Error::invalid("top_n must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: ItemId,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SearchResult {
    /// Best first.
    pub ranked: Vec<Hit>,
    pub eval_count: u64,
    pub nodes_visited: u64,
}

impl SearchResult {
    pub fn ids(&self) -> Vec<ItemId> {
        self.ranked.iter().map(|h| h.id).collect()
    }
}

#[derive(Clone, Copy)]
struct Candidate {
    key: f64,
    id: ItemId,
    score: f64,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Candidate {}
impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key.total_cmp(&other.key).then(self.id.cmp(&other.id))
    }
}

/// Bounded selection of the `n` smallest `(key, id)` candidates.
pub(crate) struct TopN {
    n: usize,
    heap: BinaryHeap<Candidate>,
}

impl TopN {
    pub(crate) fn new(n: usize) -> Self {
        Self {
            n,
            heap: BinaryHeap::with_capacity(n.min(1 << 16) + 1),
        }
    }

    /// The current admission bound: a candidate must order before this to enter.
    pub(crate) fn worst_key(&self) -> Option<(f64, ItemId)> {
        (self.heap.len() == self.n)
            .then(|| self.heap.peek().map(|c| (c.key, c.id)))
            .flatten()
    }

    #[inline]
    pub(crate) fn push(&mut self, key: f64, id: ItemId, score: f64) {
        let c = Candidate { key, id, score };
        if self.heap.len() < self.n {
            self.heap.push(c);
        } else if let Some(worst) = self.heap.peek() {
            if c < *worst {
                self.heap.pop();
                self.heap.push(c);
            }
        }
    }

    pub(crate) fn into_hits(self) -> Vec<Hit> {
        self.heap
            .into_sorted_vec()
            .into_iter()
            .map(|c| Hit { id: c.id, score: c.score })
            .collect()
    }
}

fn check_tree(tree: &KTree, item_count: usize) -> Result<()> {
    if tree.item_count != item_count {
        return Err(Error::Consistency(format!(
            "tree indexes {} items but corpus has {item_count}",
            tree.item_count
        )));
    }
    Ok(())
}

/// Keeps the best `width` internal nodes. `scored` is in expansion order, which breaks ties.
fn select_beam(mut scored: Vec<(f64, usize, &TreeNode)>, width: usize) -> Vec<&TreeNode> {
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.truncate(width);
    scored.into_iter().map(|(_, _, n)| n).collect()
}

pub fn beam_search_vector(
    tree: &KTree,
    embeddings: &EmbeddingSet,
    query: &[f32],
    params: &SearchParams,
) -> Result<SearchResult> {
    params.validate()?;
    check_tree(tree, embeddings.len())?;
    if embeddings.dim() != tree.dim {
        return Err(Error::invalid("embedding dim differs from tree dim"));
    }
    params.metric.check_query(query, tree.dim)?;

    let metric = params.metric;
    let mut pool = TopN::new(params.top_n);
    let mut evals = 0u64;
    let mut visited = 1u64;
    let mut scan_leaf = |members: &[ItemId], evals: &mut u64| {
        for &id in members {
            if params.exclude_ids.contains(&id) {
                continue;
            }
            let (score, key) = metric.score(query, embeddings.vector(id));
            *evals += 1;
            pool.push(key, id, score);
        }
    };

    let mut beam = vec![&tree.root];
    if let TreeNode::Leaf { member_ids } = &tree.root {
        scan_leaf(member_ids, &mut evals);
        beam.clear();
    }
    while !beam.is_empty() {
        let mut scored = Vec::new();
        for node in beam {
            for child in node.children() {
                visited += 1;
                match child {
                    TreeNode::Leaf { member_ids } => scan_leaf(member_ids, &mut evals),
                    TreeNode::Internal { centroid, .. } => {
                        let (_, key) = metric.score(query, centroid);
                        evals += 1;
                        scored.push((key, scored.len(), child));
                    }
                }
            }
        }
        beam = select_beam(scored, params.beam_width);
    }

    Ok(SearchResult {
        ranked: pool.into_hits(),
        eval_count: evals,
        nodes_visited: visited,
    })
}

/// What one pair score feeds into during a pairwise expansion step.
enum Slot {
    /// Representative of the `n`-th internal child of this step.
    Route(usize),
    Member(ItemId),
}

pub fn beam_search_pairwise(
    tree: &KTree,
    items: &ItemTable,
    query_text: &str,
    scorer: &dyn PairScorer,
    params: &SearchParams,
) -> Result<SearchResult> {
    params.validate()?;
    check_tree(tree, items.len())?;
    if !tree.root.is_leaf() && tree.rep_count == 0 {
        return Err(Error::Config(
            "pairwise search needs a tree built with representatives (rep_count ≥ 1)".into(),
        ));
    }

    let text = |id: ItemId| items.text(id).expect("tree ids are within the item table");
    let mut pool = TopN::new(params.top_n);
    let mut evals = 0u64;
    let mut visited = 1u64;

    // The root is expanded unscored; a leaf root is scanned directly.
    let (mut step, mut beam): (Vec<&TreeNode>, Vec<&TreeNode>) = match &tree.root {
        TreeNode::Leaf { .. } => (vec![&tree.root], Vec::new()),
        TreeNode::Internal { .. } => (Vec::new(), vec![&tree.root]),
    };
    let mut level = 0usize;
    loop {
        if step.is_empty() {
            if beam.is_empty() {
                break;
            }
            step = beam.iter().flat_map(|n| n.children()).collect();
            visited += step.len() as u64;
            level += 1;
        }

        // Gather every pair of this step, then score them in one pass.
        let mut pairs: Vec<(&str, &str)> = Vec::new();
        let mut slots: Vec<Slot> = Vec::new();
        let mut internals: Vec<&TreeNode> = Vec::new();
        for &node in &step {
            match node {
                TreeNode::Leaf { member_ids } => {
                    for &id in member_ids {
                        if !params.exclude_ids.contains(&id) {
                            pairs.push((query_text, text(id)));
                            slots.push(Slot::Member(id));
                        }
                    }
                }
                TreeNode::Internal { rep_ids, .. } => {
                    if rep_ids.is_empty() {
                        return Err(Error::Config(format!(
                            "internal node at level {level} has no representatives"
                        )));
                    }
                    for &r in rep_ids {
                        pairs.push((query_text, text(r)));
                        slots.push(Slot::Route(internals.len()));
                    }
                    internals.push(node);
                }
            }
        }
        let scores = score_pairs(scorer, &pairs).map_err(|source| Error::Scorer {
            context: format!("tree level {level}, {} pairs", pairs.len()),
            source,
        })?;
        evals += scores.len() as u64;

        // Routing score of an internal node is its best representative's score.
        let mut route = vec![f64::NEG_INFINITY; internals.len()];
        for (slot, &score) in slots.iter().zip(&scores) {
            match *slot {
                Slot::Route(i) => route[i] = route[i].max(score),
                Slot::Member(id) => pool.push(-score, id, score),
            }
        }
        let scored = internals
            .into_iter()
            .enumerate()
            .map(|(i, n)| (-route[i], i, n))
            .collect();
        beam = select_beam(scored, params.beam_width);
        step.clear();
    }

    Ok(SearchResult {
        ranked: pool.into_hits(),
        eval_count: evals,
        nodes_visited: visited,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Query {
    Vector(Vec<f32>),
    Text(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchQuery {
    pub query: Query,
    /// Added to the shared `exclude_ids` for this query only.
    pub exclude_ids: Vec<ItemId>,
}

#[derive(Clone, Copy)]
pub enum SearchMode<'a> {
    Vector { embeddings: &'a EmbeddingSet },
    Pairwise { items: &'a ItemTable, scorer: &'a dyn PairScorer },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalCountSummary {
    pub mean: f64,
    pub min: u64,
    pub max: u64,
    pub queries: usize,
}

impl EvalCountSummary {
    pub fn from_counts(counts: impl IntoIterator<Item = u64>) -> Option<Self> {
        let counts: Vec<u64> = counts.into_iter().collect();
        if counts.is_empty() {
            return None;
        }
        let total: u128 = counts.iter().map(|&c| c as u128).sum();
        Some(Self {
            mean: total as f64 / counts.len() as f64,
            min: *counts.iter().min().unwrap(),
            max: *counts.iter().max().unwrap(),
            queries: counts.len(),
        })
    }
}

#[derive(Debug)]
pub struct BatchOutcome {
    /// One entry per query, in input order.
    pub results: Vec<Result<SearchResult>>,
    /// Over successful queries only; `None` if all failed.
    pub summary: Option<EvalCountSummary>,
}

impl BatchOutcome {
    pub fn failed(&self) -> Vec<usize> {
        self.results
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r.is_err().then_some(i))
            .collect()
    }
}

pub fn search_one(tree: &KTree, query: &BatchQuery, params: &SearchParams, mode: SearchMode<'_>) -> Result<SearchResult> {
    let params = if query.exclude_ids.is_empty() {
        std::borrow::Cow::Borrowed(params)
    } else {
        std::borrow::Cow::Owned(params.clone().excluding(query.exclude_ids.iter().copied()))
    };
    match (&query.query, mode) {
        (Query::Vector(v), SearchMode::Vector { embeddings }) => beam_search_vector(tree, embeddings, v, &params),
        (Query::Text(t), SearchMode::Pairwise { items, scorer }) => {
            beam_search_pairwise(tree, items, t, scorer, &params)
        }
        (Query::Vector(_), SearchMode::Pairwise { .. }) => {
            Err(Error::invalid("pairwise mode needs a text query"))
        }
        (Query::Text(_), SearchMode::Vector { .. }) => Err(Error::invalid("vector mode needs a vector query")),
    }
}

/// Runs every query independently; a failing query does not stop the batch.
pub fn batch_search(tree: &KTree, queries: &[BatchQuery], params: &SearchParams, mode: SearchMode<'_>) -> BatchOutcome {
    let results: Vec<Result<SearchResult>> = queries
        .par_iter()
        .map(|q| search_one(tree, q, params, mode))
        .collect();
    let summary = EvalCountSummary::from_counts(results.iter().filter_map(|r| r.as_ref().ok()).map(|r| r.eval_count));
    BatchOutcome { results, summary }
}
