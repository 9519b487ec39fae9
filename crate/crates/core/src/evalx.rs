//! Binary-relevance ranking metrics and the evaluation harness.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::search::SearchResult;
use crate::vecstore::ItemId;

pub const DEFAULT_CUTOFF: usize = 20;
pub const MRR_SHORT_CUTOFF: usize = 10;

/// Ground truth: each query's set of relevant items.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct QRels {
    map: BTreeMap<ItemId, BTreeSet<ItemId>>,
}

impl QRels {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records `relevant` for `query`. Self-references are rejected.
    pub fn insert(&mut self, query: ItemId, relevant: ItemId) -> Result<()> {
        if query == relevant {
            return Err(Error::invalid(format!("query {query} cannot be relevant to itself")));
        }
        self.map.entry(query).or_default().insert(relevant);
        Ok(())
    }

    pub fn get(&self, query: ItemId) -> Option<&BTreeSet<ItemId>> {
        self.map.get(&query)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn queries(&self) -> impl Iterator<Item = ItemId> + '_ {
        self.map.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ItemId, &BTreeSet<ItemId>)> {
        self.map.iter().map(|(q, r)| (*q, r))
    }

    /// Checks that every id refers to a corpus item.
    pub fn validate(&self, item_count: usize) -> Result<()> {
        for (q, rel) in &self.map {
            for &id in std::iter::once(q).chain(rel) {
                if id as usize >= item_count {
                    return Err(Error::Consistency(format!(
                        "qrels id {id} outside corpus of {item_count} items"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Reads `query_id<TAB>relevant_id` rows.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut qrels = QRels::new();
        let mut offset = 0u64;
        for raw in text.split_inclusive('\n') {
            let line = raw.trim_end_matches(['\n', '\r']);
            let parsed = line
                .split_once('\t')
                .and_then(|(q, r)| Some((q.parse::<ItemId>().ok()?, r.parse::<ItemId>().ok()?)));
            let (q, r) = parsed.ok_or_else(|| Error::format(offset, format!("bad qrels row {line:?}")))?;
            qrels.insert(q, r).map_err(|e| Error::format(offset, e.to_string()))?;
            offset += raw.len() as u64;
        }
        Ok(qrels)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::new();
        for (q, rel) in &self.map {
            for r in rel {
                out.push_str(&format!("{q}\t{r}\n"));
            }
        }
        fs::write(path.as_ref(), out).map_err(|e| Error::io(path, e))
    }
}

fn check_inputs(ranked: &[ItemId], relevant: &BTreeSet<ItemId>) -> Result<()> {
    if relevant.is_empty() {
        return Err(Error::invalid("relevant set is empty"));
    }
    let distinct: BTreeSet<_> = ranked.iter().collect();
    if distinct.len() != ranked.len() {
        return Err(Error::invalid("ranked list contains duplicates"));
    }
    Ok(())
}

fn within(ranked: &[ItemId], cutoff: Option<usize>) -> &[ItemId] {
    match cutoff {
        Some(k) => &ranked[..ranked.len().min(k)],
        None => ranked,
    }
}

pub fn average_precision(ranked: &[ItemId], relevant: &BTreeSet<ItemId>) -> Result<f64> {
    check_inputs(ranked, relevant)?;
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, id) in ranked.iter().enumerate() {
        if relevant.contains(id) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / relevant.len() as f64)
}

/// `1/r` for the first relevant item at rank `r <= cutoff`, else 0.
pub fn reciprocal_rank(ranked: &[ItemId], relevant: &BTreeSet<ItemId>, cutoff: Option<usize>) -> Result<f64> {
    check_inputs(ranked, relevant)?;
    Ok(within(ranked, cutoff)
        .iter()
        .position(|id| relevant.contains(id))
        .map_or(0.0, |p| 1.0 / (p + 1) as f64))
}

pub fn ndcg(ranked: &[ItemId], relevant: &BTreeSet<ItemId>, cutoff: Option<usize>) -> Result<f64> {
    check_inputs(ranked, relevant)?;
    let gain = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let dcg: f64 = within(ranked, cutoff)
        .iter()
        .enumerate()
        .filter(|(_, id)| relevant.contains(id))
        .map(|(i, _)| gain(i + 1))
        .sum();
    let ideal_hits = cutoff.map_or(relevant.len(), |k| relevant.len().min(k));
    let idcg: f64 = (1..=ideal_hits).map(gain).sum();
    Ok(if idcg > 0.0 { dcg / idcg } else { 0.0 })
}

/// 1.0 iff the top item is relevant; an empty list scores 0.
pub fn precision_at_1(ranked: &[ItemId], relevant: &BTreeSet<ItemId>) -> f64 {
    match ranked.first() {
        Some(id) if relevant.contains(id) => 1.0,
        _ => 0.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryRecord {
    pub query_id: ItemId,
    pub average_precision: f64,
    pub p_at_1: f64,
    pub reciprocal_rank: f64,
    pub ndcg: f64,
    pub reciprocal_rank_at_10: f64,
    pub eval_count: u64,
    pub ranked: Vec<ItemId>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryError {
    pub query_id: ItemId,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub method: String,
    pub map_score: f64,
    pub p_at_1: f64,
    pub mrr: f64,
    pub ndcg: f64,
    pub mrr_at_10: f64,
    pub query_count: usize,
    pub mean_eval_count: f64,
    pub cutoff: usize,
    pub per_query: Vec<QueryRecord>,
    pub errors: Vec<QueryError>,
}

pub const TSV_HEADER: &str = "method\tMAP\tP@1\tMRR\tNDCG\tMRR@10\tmean_eval_count";

impl EvalReport {
    pub fn tsv_row(&self) -> String {
        format!(
            "{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.1}",
            self.method, self.map_score, self.p_at_1, self.mrr, self.ndcg, self.mrr_at_10, self.mean_eval_count
        )
    }

    pub fn is_clean(&self) -> bool {
        self.errors.is_empty()
    }
}

pub fn render_tsv(reports: &[EvalReport]) -> String {
    let mut out = String::from(TSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.tsv_row());
        out.push('\n');
    }
    out
}

/// Scores every qrels query against its result, truncated to the top `k`.
///
/// Queries without a result are listed in `errors` and left out of the averages.
pub fn evaluate(results: &BTreeMap<ItemId, SearchResult>, qrels: &QRels, k: usize) -> EvalReport {
    let mut per_query = Vec::new();
    let mut errors = Vec::new();
    for (query_id, relevant) in qrels.iter() {
        let Some(result) = results.get(&query_id) else {
            errors.push(QueryError { query_id, message: "no search result".into() });
            continue;
        };
        let ranked: Vec<ItemId> = result.ranked.iter().take(k).map(|h| h.id).collect();
        let record = (|| -> Result<QueryRecord> {
            Ok(QueryRecord {
                query_id,
                average_precision: average_precision(&ranked, relevant)?,
                p_at_1: precision_at_1(&ranked, relevant),
                reciprocal_rank: reciprocal_rank(&ranked, relevant, None)?,
                ndcg: ndcg(&ranked, relevant, Some(k))?,
                reciprocal_rank_at_10: reciprocal_rank(&ranked, relevant, Some(MRR_SHORT_CUTOFF))?,
                eval_count: result.eval_count,
                ranked: ranked.clone(),
            })
        })();
        match record {
            Ok(r) => per_query.push(r),
            Err(e) => errors.push(QueryError { query_id, message: e.to_string() }),
        }
    }
    let n = per_query.len();
    let mean = |f: fn(&QueryRecord) -> f64| {
        if n == 0 {
            0.0
        } else {
            per_query.iter().map(f).sum::<f64>() / n as f64
        }
    };
    EvalReport {
        method: String::new(),
        map_score: mean(|r| r.average_precision),
        p_at_1: mean(|r| r.p_at_1),
        mrr: mean(|r| r.reciprocal_rank),
        ndcg: mean(|r| r.ndcg),
        mrr_at_10: mean(|r| r.reciprocal_rank_at_10),
        mean_eval_count: mean(|r| r.eval_count as f64),
        query_count: n,
        cutoff: k,
        per_query,
        errors,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search::Hit;
    use proptest::prelude::*;

    fn rel(ids: &[ItemId]) -> BTreeSet<ItemId> {
        ids.iter().copied().collect()
    }

    /// A list with the single relevant item 0 placed at 1-based `rank`.
    fn at_rank(rank: usize, len: usize) -> Vec<ItemId> {
        let mut v: Vec<ItemId> = (1..len as ItemId).collect();
        v.insert(rank - 1, 0);
        v
    }

    #[test]
    fn average_precision_examples() {
        assert_eq!(average_precision(&at_rank(1, 5), &rel(&[0])).unwrap(), 1.0);
        assert_eq!(average_precision(&at_rank(4, 5), &rel(&[0])).unwrap(), 0.25);
        // relevant {a, b} = {10, 11}, ranked [a, x, b]
        let ap = average_precision(&[10, 99, 11], &rel(&[10, 11])).unwrap();
        assert!((ap - 0.8333).abs() < 1e-4);
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(average_precision(&[5, 6], &rel(&[1])).unwrap(), 0.0);
    }

    #[test]
    fn reciprocal_rank_examples() {
        assert_eq!(reciprocal_rank(&at_rank(1, 3), &rel(&[0]), None).unwrap(), 1.0);
        assert_eq!(reciprocal_rank(&at_rank(11, 20), &rel(&[0]), Some(10)).unwrap(), 0.0);
        assert!((reciprocal_rank(&at_rank(3, 5), &rel(&[0]), None).unwrap() - 0.3333).abs() < 1e-4);
        assert!((reciprocal_rank(&at_rank(11, 20), &rel(&[0]), None).unwrap() - 1.0 / 11.0).abs() < 1e-12);
    }

    #[test]
    fn ndcg_examples() {
        assert_eq!(ndcg(&at_rank(1, 5), &rel(&[0]), Some(20)).unwrap(), 1.0);
        let two = ndcg(&at_rank(2, 5), &rel(&[0]), Some(20)).unwrap();
        assert!((two - 0.6309).abs() < 1e-4);
        assert!((two - 1.0 / 3f64.log2()).abs() < 1e-12);
        assert_eq!(ndcg(&[1, 2, 3], &rel(&[0]), Some(20)).unwrap(), 0.0);
        // Two relevant, both found at ranks 1 and 3: (1 + 1/log2 4) / (1 + 1/log2 3).
        let v = ndcg(&[7, 1, 8], &rel(&[7, 8]), None).unwrap();
        assert!((v - 1.5 / (1.0 + 1.0 / 3f64.log2())).abs() < 1e-12);
    }

    #[test]
    fn precision_at_one_examples() {
        assert_eq!(precision_at_1(&at_rank(1, 3), &rel(&[0])), 1.0);
        assert_eq!(precision_at_1(&at_rank(2, 3), &rel(&[0])), 0.0);
        assert_eq!(precision_at_1(&[], &rel(&[0])), 0.0);
    }

    #[test]
    fn empty_relevant_and_duplicates_are_rejected() {
        let empty = BTreeSet::new();
        assert!(average_precision(&[1], &empty).is_err());
        assert!(reciprocal_rank(&[1], &empty, None).is_err());
        assert!(ndcg(&[1], &empty, None).is_err());
        assert!(average_precision(&[1, 1], &rel(&[1])).is_err());
    }

    fn result(ids: &[ItemId]) -> SearchResult {
        SearchResult {
            ranked: ids.iter().map(|&id| Hit { id, score: 0.0 }).collect(),
            eval_count: 10,
            nodes_visited: 0,
        }
    }

    #[test]
    fn evaluate_perfect_and_mixed() {
        let mut q = QRels::new();
        q.insert(0, 1).unwrap();
        q.insert(2, 3).unwrap();
        let perfect: BTreeMap<_, _> = [(0, result(&[1, 5])), (2, result(&[3, 5]))].into();
        let r = evaluate(&perfect, &q, 20);
        for v in [r.map_score, r.p_at_1, r.mrr, r.ndcg, r.mrr_at_10] {
            assert_eq!(v, 1.0);
        }
        assert_eq!(r.mean_eval_count, 10.0);

        let mixed: BTreeMap<_, _> = [(0, result(&[1, 5])), (2, result(&[5, 3]))].into();
        let r = evaluate(&mixed, &q, 20);
        assert_eq!(r.mrr, 0.75);
        assert_eq!(r.map_score, r.mrr);
    }

    #[test]
    fn evaluate_truncates_and_reports_missing() {
        let mut q = QRels::new();
        q.insert(0, 1).unwrap();
        q.insert(4, 2).unwrap();
        let ids: Vec<ItemId> = (100..130).chain([1]).collect();
        let results: BTreeMap<_, _> = [(0, result(&ids))].into();
        let r = evaluate(&results, &q, 20);
        assert_eq!(r.query_count, 1);
        assert_eq!(r.mrr, 0.0);
        assert_eq!(r.errors, vec![QueryError { query_id: 4, message: "no search result".into() }]);
        assert!(!r.is_clean());
    }

    #[test]
    fn qrels_reject_self_reference_and_round_trip() {
        let mut q = QRels::new();
        assert!(q.insert(3, 3).is_err());
        q.insert(3, 4).unwrap();
        q.insert(3, 5).unwrap();
        q.insert(0, 9).unwrap();
        assert!(q.validate(10).is_ok());
        assert!(q.validate(9).is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("qrels.tsv");
        q.save(&path).unwrap();
        assert_eq!(QRels::load(&path).unwrap(), q);
        fs::write(&path, "1\t1\n").unwrap();
        assert!(matches!(QRels::load(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn map_equals_mrr_on_singletons_over_random_permutations() {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let mut ids: Vec<ItemId> = (0..30).collect();
            ids.shuffle(&mut rng);
            let relevant = rel(&[0]);
            let list = &ids[..20];
            assert_eq!(
                average_precision(list, &relevant).unwrap(),
                reciprocal_rank(list, &relevant, None).unwrap()
            );
        }
    }

    proptest! {
        #[test]
        fn metrics_bounded_and_relabel_invariant(
            perm in Just((0u32..40).collect::<Vec<_>>()).prop_shuffle(),
            relevant in proptest::collection::btree_set(0u32..40, 1..4),
            offset in 1u32..1000,
        ) {
            let ranked = &perm[..20];
            let shifted: Vec<ItemId> = ranked.iter().map(|&i| i + offset).collect();
            let shifted_rel: BTreeSet<ItemId> = relevant.iter().map(|&i| i + offset).collect();
            let a = [
                average_precision(ranked, &relevant).unwrap(),
                reciprocal_rank(ranked, &relevant, None).unwrap(),
                ndcg(ranked, &relevant, Some(20)).unwrap(),
                precision_at_1(ranked, &relevant),
                reciprocal_rank(ranked, &relevant, Some(10)).unwrap(),
            ];
            let b = [
                average_precision(&shifted, &shifted_rel).unwrap(),
                reciprocal_rank(&shifted, &shifted_rel, None).unwrap(),
                ndcg(&shifted, &shifted_rel, Some(20)).unwrap(),
                precision_at_1(&shifted, &shifted_rel),
                reciprocal_rank(&shifted, &shifted_rel, Some(10)).unwrap(),
            ];
            prop_assert_eq!(a, b);
            for v in a {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn moving_relevant_up_never_hurts(len in 2usize..25, from in 1usize..25) {
            let from = from.min(len);
            let to = from - 1;
            prop_assume!(to >= 1);
            let relevant = rel(&[0]);
            let worse = at_rank(from, len);
            let better = at_rank(to, len);
            prop_assert!(average_precision(&better, &relevant).unwrap() >= average_precision(&worse, &relevant).unwrap());
            prop_assert!(ndcg(&better, &relevant, Some(20)).unwrap() >= ndcg(&worse, &relevant, Some(20)).unwrap());
            prop_assert!(reciprocal_rank(&better, &relevant, Some(10)).unwrap() >= reciprocal_rank(&worse, &relevant, Some(10)).unwrap());
            prop_assert!(precision_at_1(&better, &relevant) >= precision_at_1(&worse, &relevant));
        }
    }
}
