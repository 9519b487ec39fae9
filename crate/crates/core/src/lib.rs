//! Approximate nearest-neighbour retrieval over a hierarchical k-means tree.
//!
//! Items are embedded once, clustered recursively into a [`KTree`], and
//! queried with a level-synchronous beam search. Routing can compare the
//! query against centroids ([`beam_search_vector`]) or run a pairwise text
//! scorer against a few representative items per node
//! ([`beam_search_pairwise`]). Exact baselines and ranking metrics sit
//! alongside for comparison.
//!
//! ```
//! use ktree::{build_tree, beam_search_vector, ingest, Metric, SearchParams, TreeConfig};
//!
//! let corpus = ingest::synth_corpus(4, 25, 8, 1.0, 42)?;
//! let tree = build_tree(&corpus.embeddings, &TreeConfig::new(4))?;
//! let params = SearchParams { metric: Metric::Euclidean, top_n: 5, ..SearchParams::default() };
//! let hits = beam_search_vector(&tree, &corpus.embeddings, corpus.embeddings.vector(0), &params)?;
//! assert_eq!(hits.ranked[0].id, 0);
//! # Ok::<(), ktree::Error>(())
//! ```

mod binfmt;
pub mod baselines;
pub mod error;
pub mod evalx;
pub mod ingest;
pub mod kmeans;
pub mod tree;
pub mod scorers;
pub mod search;
pub mod vecstore;

pub use baselines::{brute_force_topn, exhaustive_pairwise_topn, kdtree_build, kdtree_topn, KdTree};
pub use error::{Error, Result};
pub use evalx::{evaluate, EvalReport, QRels};
pub use kmeans::{kmeans, Clustering, Init, KMeansConfig};
pub use tree::{build_tree, KTree, TreeConfig, TreeNode, TreeStats};
pub use scorers::{LexicalScorer, PairScorer, RemoteConfig, RemoteScorer, ScoreError};
pub use search::{
    batch_search, beam_search_pairwise, beam_search_vector, BatchQuery, Hit, Metric, Query, SearchMode,
    SearchParams, SearchResult,
};
pub use vecstore::{EmbeddingSet, ItemId, ItemTable, PointSet};
