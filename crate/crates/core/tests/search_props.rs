mod common;

use std::collections::{BTreeSet, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};

use common::{gaussian, lexical_server, positive_vectors};
use ktree::baselines::brute_force_topn;
use ktree::ingest::synth_text_corpus;
use ktree::tree::{deserialize_tree, serialize_tree};
use ktree::scorers::{LexicalScorer, ScorerInfo};
use ktree::search::{batch_search, search_one, BatchQuery, Query, SearchMode};
use ktree::vecstore::cosine_similarity;
use ktree::{
    beam_search_pairwise, beam_search_vector, build_tree, EmbeddingSet, Error, ItemId, KTree, Metric, PairScorer,
    RemoteConfig, RemoteScorer, ScoreError, SearchParams, SearchResult, TreeConfig, TreeNode,
};
use proptest::prelude::*;

/// Counts every pair it is asked to score.
struct Counting<'a> {
    inner: &'a dyn PairScorer,
    calls: AtomicU64,
}

impl<'a> Counting<'a> {
    fn new(inner: &'a dyn PairScorer) -> Self {
        Counting { inner, calls: AtomicU64::new(0) }
    }
}

impl PairScorer for Counting<'_> {
    fn info(&self) -> ScorerInfo {
        self.inner.info()
    }

    fn score_batch(&self, pairs: &[(&str, &str)]) -> Result<Vec<f64>, ScoreError> {
        self.calls.fetch_add(pairs.len() as u64, Ordering::SeqCst);
        self.inner.score_batch(pairs)
    }
}

/// Cosine of the stored embeddings behind two item texts.
struct EmbeddingCosine<'a> {
    embeddings: &'a EmbeddingSet,
    by_text: HashMap<&'a str, ItemId>,
}

impl<'a> EmbeddingCosine<'a> {
    fn new(embeddings: &'a EmbeddingSet) -> Self {
        let by_text = embeddings.items().iter().map(|(id, t)| (t, id)).collect();
        EmbeddingCosine { embeddings, by_text }
    }
}

impl PairScorer for EmbeddingCosine<'_> {
    fn info(&self) -> ScorerInfo {
        ScorerInfo { name: "embedding-cosine".into(), batch_limit: 32 }
    }

    fn score_batch(&self, pairs: &[(&str, &str)]) -> Result<Vec<f64>, ScoreError> {
        Ok(pairs
            .iter()
            .map(|(a, b)| {
                let va = self.embeddings.vector(self.by_text[a]);
                let vb = self.embeddings.vector(self.by_text[b]);
                cosine_similarity(va, vb).unwrap()
            })
            .collect())
    }
}

fn assert_valid(result: &SearchResult, params: &SearchParams, higher_is_better: bool) {
    assert!(result.ranked.len() <= params.top_n);
    for w in result.ranked.windows(2) {
        let (a, b) = (w[0], w[1]);
        let ordered = if higher_is_better { a.score > b.score } else { a.score < b.score };
        assert!(ordered || (a.score == b.score && a.id < b.id), "{a:?} before {b:?}");
    }
    let ids: BTreeSet<ItemId> = result.ids().into_iter().collect();
    assert_eq!(ids.len(), result.ranked.len(), "duplicate ids");
    assert!(ids.is_disjoint(&params.exclude_ids));
}

/// Evaluation count of a vector-mode search, recounted by walking the tree.
fn recount_vector(tree: &KTree, emb: &EmbeddingSet, query: &[f32], params: &SearchParams) -> u64 {
    let leaf_cost = |m: &[ItemId]| m.iter().filter(|id| !params.exclude_ids.contains(id)).count() as u64;
    let mut count = 0;
    let mut beam: Vec<&TreeNode> = match &tree.root {
        TreeNode::Leaf { member_ids } => return leaf_cost(member_ids),
        root => vec![root],
    };
    while !beam.is_empty() {
        let mut internal = Vec::new();
        for node in &beam {
            for child in node.children() {
                match child {
                    TreeNode::Leaf { member_ids } => count += leaf_cost(member_ids),
                    TreeNode::Internal { centroid, .. } => {
                        count += 1;
                        internal.push((-cosine_similarity(query, centroid).unwrap_or(0.0), internal.len(), child));
                    }
                }
            }
        }
        internal.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        beam = internal.into_iter().take(params.beam_width).map(|x| x.2).collect();
    }
    let _ = emb;
    count
}

fn self_query(id: ItemId, emb: &EmbeddingSet) -> (Vec<f32>, SearchParams) {
    (emb.vector(id).to_vec(), SearchParams::default().excluding([id]))
}

#[test]
fn vector_eval_count_matches_recount() {
    let emb = gaussian(12, 40, 8, 5);
    let tree = build_tree(&emb, &TreeConfig::new(3)).unwrap();
    for beam in [1, 2, 5] {
        for q in (0..480).step_by(37) {
            let (query, mut params) = self_query(q, &emb);
            params.beam_width = beam;
            let r = beam_search_vector(&tree, &emb, &query, &params).unwrap();
            assert_eq!(r.eval_count, recount_vector(&tree, &emb, &query, &params));
            assert_valid(&r, &params, true);
        }
    }
}

fn text_tree() -> (ktree::ingest::SynthCorpus, KTree) {
    let corpus = synth_text_corpus(6, 20, 9).unwrap();
    let mut cfg = TreeConfig::new(3);
    cfg.leaf_capacity = 8;
    let tree = build_tree(&corpus.embeddings, &cfg).unwrap();
    (corpus, tree)
}

#[test]
fn pairwise_conformance_for_both_scorers() {
    let (corpus, tree) = text_tree();
    let server = lexical_server();
    let mut config = RemoteConfig::new(&server.url);
    config.batch_limit = 16;
    let remote = RemoteScorer::new(config).unwrap();
    let scorers: [&dyn PairScorer; 2] = [&LexicalScorer, &remote];
    let mut per_scorer = Vec::new();
    for scorer in scorers {
        let counting = Counting::new(scorer);
        let mut results = Vec::new();
        for q in (0..corpus.items().len() as ItemId).step_by(11) {
            let params = SearchParams { beam_width: 2, top_n: 10, ..SearchParams::default() }.excluding([q]);
            let before = counting.calls.load(Ordering::SeqCst);
            let r = beam_search_pairwise(&tree, corpus.items(), corpus.items().text(q).unwrap(), &counting, &params)
                .unwrap();
            assert_eq!(r.eval_count, counting.calls.load(Ordering::SeqCst) - before);
            assert_valid(&r, &params, true);
            assert!(r.ranked.iter().all(|h| (0.0..=1.0).contains(&h.score)));
            results.push(r);
        }
        per_scorer.push(results);
    }
    assert_eq!(per_scorer[0], per_scorer[1]);
}

#[test]
fn pairwise_rejects_tree_without_representatives() {
    let (corpus, tree) = text_tree();
    let mut bare = tree.clone();
    bare.rep_count = 0;
    let err = beam_search_pairwise(&bare, corpus.items(), "c1w1", &LexicalScorer, &SearchParams::default()).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err:?}");
}

#[test]
fn pairwise_propagates_scorer_failure_with_context() {
    struct Broken;
    impl PairScorer for Broken {
        fn info(&self) -> ScorerInfo {
            ScorerInfo { name: "broken".into(), batch_limit: 4 }
        }
        fn score_batch(&self, _: &[(&str, &str)]) -> Result<Vec<f64>, ScoreError> {
            Err(ScoreError::Timeout { attempts: 3 })
        }
    }
    let (corpus, tree) = text_tree();
    let err = beam_search_pairwise(&tree, corpus.items(), "c1w1", &Broken, &SearchParams::default()).unwrap_err();
    match err {
        Error::Scorer { context, source } => {
            assert!(context.contains("level"), "{context}");
            assert!(source.is_retryable());
        }
        other => panic!("{other:?}"),
    }
}

/// Replaces every centroid with the vector of the node's first representative.
fn centroids_from_reps(node: &mut TreeNode, emb: &EmbeddingSet) {
    if let TreeNode::Internal { centroid, children, rep_ids } = node {
        *centroid = emb.vector(rep_ids[0]).to_vec();
        for c in children {
            centroids_from_reps(c, emb);
        }
    }
}

#[test]
fn single_representative_cosine_routing_matches_vector_mode() {
    let emb = positive_vectors(300, 12, 21);
    let mut cfg = TreeConfig::new(4);
    cfg.leaf_capacity = 10;
    cfg.rep_count = 1;
    let tree = build_tree(&emb, &cfg).unwrap();
    let mut rep_tree = tree.clone();
    centroids_from_reps(&mut rep_tree.root, &emb);
    let scorer = EmbeddingCosine::new(&emb);
    for q in (0..300).step_by(7) {
        for beam in [1, 3] {
            let params = SearchParams { beam_width: beam, top_n: 15, ..SearchParams::default() }.excluding([q]);
            let text = emb.items().text(q).unwrap();
            let pairwise = beam_search_pairwise(&tree, emb.items(), text, &scorer, &params).unwrap();
            let vector = beam_search_vector(&rep_tree, &emb, emb.vector(q), &params).unwrap();
            assert_eq!(pairwise.ids(), vector.ids(), "query {q} beam {beam}");
            assert_eq!(pairwise.eval_count, vector.eval_count);
        }
    }
}

fn truncate_reps(node: &mut TreeNode, keep: usize) {
    if let TreeNode::Internal { children, rep_ids, .. } = node {
        rep_ids.truncate(keep);
        for c in children {
            truncate_reps(c, keep);
        }
    }
}

#[test]
fn representatives_are_nearest_first_prefixes() {
    let (corpus, _) = text_tree();
    let mut cfg = TreeConfig::new(3);
    cfg.leaf_capacity = 8;
    cfg.rep_count = 5;
    let full = build_tree(&corpus.embeddings, &cfg).unwrap();
    for r in 1..5 {
        cfg.rep_count = r;
        let mut expected = full.clone();
        truncate_reps(&mut expected.root, r);
        expected.rep_count = r;
        assert_eq!(build_tree(&corpus.embeddings, &cfg).unwrap(), expected);
    }
}

#[test]
fn more_representatives_never_lower_eval_count() {
    let (corpus, _) = text_tree();
    let mut cfg = TreeConfig::new(3);
    cfg.leaf_capacity = 8;
    let trees: Vec<KTree> = (1..=5)
        .map(|r| {
            cfg.rep_count = r;
            build_tree(&corpus.embeddings, &cfg).unwrap()
        })
        .collect();
    let count = |tree: &KTree, q: ItemId, beam_width: usize| {
        let text = corpus.items().text(q).unwrap();
        let params = SearchParams { beam_width, top_n: 10, ..SearchParams::default() }.excluding([q]);
        beam_search_pairwise(tree, corpus.items(), text, &LexicalScorer, &params).unwrap().eval_count
    };
    let n = corpus.items().len() as ItemId;
    // With every node of each level in the beam, routing cannot change.
    let wide = trees[0].widest_internal_level();
    for q in 0..n {
        let counts: Vec<u64> = trees.iter().map(|t| count(t, q, wide)).collect();
        assert!(counts.windows(2).all(|w| w[0] < w[1]), "query {q}: {counts:?}");
    }
    // A narrow beam may reroute a single query onto cheaper nodes; the mean still grows.
    let means: Vec<u64> = trees.iter().map(|t| (0..n).map(|q| count(t, q, 2)).sum()).collect();
    assert!(means.windows(2).all(|w| w[0] < w[1]), "{means:?}");
}

fn true_rank(emb: &EmbeddingSet, query: &[f32], exclude: &BTreeSet<ItemId>, id: ItemId) -> usize {
    let all = brute_force_topn(emb, query, Metric::Cosine, emb.len(), exclude).unwrap();
    all.ranked.iter().position(|h| h.id == id).unwrap()
}

fn median(mut v: Vec<usize>) -> usize {
    v.sort_unstable();
    v[v.len() / 2]
}

#[test]
fn wider_beams_cost_more_and_rank_better() {
    // Structureless data, so narrow beams genuinely miss.
    let emb = positive_vectors(2000, 16, 4).normalize().unwrap();
    let tree = build_tree(&emb, &TreeConfig::new(4)).unwrap();
    let beams = [1, 2, 4, 8, 16, 64];
    let mut medians = Vec::new();
    let mut previous: Option<Vec<u64>> = None;
    for beam in beams {
        let mut counts = Vec::new();
        let mut ranks = Vec::new();
        for q in (0..2000).step_by(16) {
            let (query, mut params) = self_query(q, &emb);
            params.beam_width = beam;
            let r = beam_search_vector(&tree, &emb, &query, &params).unwrap();
            counts.push(r.eval_count);
            ranks.push(true_rank(&emb, &query, &params.exclude_ids, r.ranked[0].id));
        }
        if let Some(prev) = &previous {
            for (i, (a, b)) in prev.iter().zip(&counts).enumerate() {
                assert!(a <= b, "query #{i}: beam {beam} evaluated {b} < {a}");
            }
        }
        previous = Some(counts);
        medians.push(median(ranks));
    }
    assert!(medians.windows(2).all(|w| w[0] >= w[1]), "{medians:?}");
}

#[test]
fn batch_equals_individual_calls() {
    let emb = gaussian(8, 30, 6, 2);
    let tree = build_tree(&emb, &TreeConfig::new(3)).unwrap();
    let params = SearchParams { beam_width: 2, metric: Metric::Euclidean, ..SearchParams::default() };
    let queries: Vec<BatchQuery> = (0..20)
        .map(|i| BatchQuery { query: Query::Vector(emb.vector(i * 11).to_vec()), exclude_ids: vec![i * 11] })
        .collect();
    let mode = SearchMode::Vector { embeddings: &emb };
    let batch = batch_search(&tree, &queries, &params, mode);
    let singles: Vec<SearchResult> = queries.iter().map(|q| search_one(&tree, q, &params, mode).unwrap()).collect();
    let batched: Vec<SearchResult> = batch.results.into_iter().map(Result::unwrap).collect();
    assert_eq!(batched, singles);
    let s = batch.summary.unwrap();
    assert!(s.min as f64 <= s.mean && s.mean <= s.max as f64);
    assert_eq!(s.queries, 20);

    let one = batch_search(&tree, &queries[..1], &params, mode);
    assert_eq!(one.results[0].as_ref().unwrap(), &singles[0]);
}

#[test]
fn batch_reports_per_query_errors() {
    let emb = gaussian(4, 20, 6, 3);
    let tree = build_tree(&emb, &TreeConfig::new(3)).unwrap();
    let queries = vec![
        BatchQuery { query: Query::Vector(emb.vector(0).to_vec()), exclude_ids: vec![] },
        BatchQuery { query: Query::Vector(vec![1.0; 5]), exclude_ids: vec![] },
        BatchQuery { query: Query::Vector(vec![0.0; 6]), exclude_ids: vec![] },
    ];
    let out = batch_search(&tree, &queries, &SearchParams::default(), SearchMode::Vector { embeddings: &emb });
    assert_eq!(out.failed(), vec![1, 2]);
    assert!(matches!(out.results[1], Err(Error::InvalidInput(_))));
    assert!(matches!(out.results[2], Err(Error::Domain(_))));
    assert_eq!(out.summary.unwrap().queries, 1);
}

#[test]
fn saved_tree_searches_identically() {
    let emb = gaussian(10, 50, 8, 8);
    let mut cfg = TreeConfig::new(4);
    cfg.rep_count = 2;
    let tree = build_tree(&emb, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("index.ktr");
    serialize_tree(&tree, &path).unwrap();
    let loaded = deserialize_tree(&path).unwrap();
    assert_eq!(loaded, tree);
    for q in (0..500).step_by(25) {
        let (query, params) = self_query(q, &emb);
        assert_eq!(
            beam_search_vector(&loaded, &emb, &query, &params).unwrap(),
            beam_search_vector(&tree, &emb, &query, &params).unwrap()
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn exhaustive_beam_equals_brute_force(
        seed in any::<u64>(),
        n in 20usize..160,
        dim in 2usize..10,
        branching in 2usize..6,
        leaf_capacity in 2usize..12,
        euclidean in any::<bool>(),
    ) {
        let emb = positive_vectors(n, dim, seed);
        let mut cfg = TreeConfig::new(branching);
        cfg.leaf_capacity = leaf_capacity;
        cfg.seed = seed;
        let tree = build_tree(&emb, &cfg).unwrap();
        let metric = if euclidean { Metric::Euclidean } else { Metric::Cosine };
        let params = SearchParams {
            beam_width: tree.widest_internal_level().max(1),
            top_n: 10,
            metric,
            ..SearchParams::default()
        }
        .excluding([0]);
        let got = beam_search_vector(&tree, &emb, emb.vector(0), &params).unwrap();
        let want = brute_force_topn(&emb, emb.vector(0), metric, 10, &params.exclude_ids).unwrap();
        prop_assert_eq!(got.ranked, want.ranked);
    }
}
