//! Corpus construction from labelled question pairs, and synthetic corpora.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::evalx::QRels;
use crate::search::Metric;
use crate::vecstore::{EmbeddingSet, ItemId, ItemTable, LabeledPair};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawPair {
    pub text_a: String,
    pub text_b: String,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedPairs {
    pub pairs: Vec<RawPair>,
    /// Rows skipped for a bad label, an empty question or too few columns.
    pub dropped: usize,
    pub header_skipped: bool,
}

/// Column positions of question1, question2, is_duplicate.
type Columns = (usize, usize, usize);

fn header_columns(cols: &[&str]) -> Option<Columns> {
    let find = |name: &str| cols.iter().position(|c| c.trim().eq_ignore_ascii_case(name));
    Some((find("question1")?, find("question2")?, find("is_duplicate")?))
}

/// Parses a question-pair TSV.
///
/// A header naming `question1`, `question2` and `is_duplicate` selects those
/// columns; without one, the last three columns are used, which covers both
/// the bare three-column layout and the six-column public duplicate-question dump.
pub fn parse_pairs(path: impl AsRef<Path>) -> Result<ParsedPairs> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pairs_str(&text)
}

pub fn parse_pairs_str(text: &str) -> Result<ParsedPairs> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty()).peekable();
    let mut columns = None;
    let mut header_skipped = false;
    if let Some(first) = lines.peek() {
        let cols: Vec<&str> = first.split('\t').collect();
        if let Some(c) = header_columns(&cols) {
            columns = Some(c);
            header_skipped = true;
            lines.next();
        }
    }

    let mut pairs = Vec::new();
    let mut dropped = 0;
    for line in lines {
        let cols: Vec<&str> = line.split('\t').collect();
        let (ia, ib, il) = match columns {
            Some(c) => c,
            None if cols.len() >= 3 => (cols.len() - 3, cols.len() - 2, cols.len() - 1),
            None => {
                dropped += 1;
                continue;
            }
        };
        let (Some(a), Some(b), Some(l)) = (cols.get(ia), cols.get(ib), cols.get(il)) else {
            dropped += 1;
            continue;
        };
        let (a, b) = (a.trim(), b.trim());
        let label = match l.trim() {
            "0" => 0,
            "1" => 1,
            _ => {
                dropped += 1;
                continue;
            }
        };
        if a.is_empty() || b.is_empty() {
            dropped += 1;
            continue;
        }
        pairs.push(RawPair {
            text_a: a.to_string(),
            text_b: b.to_string(),
            label,
        });
    }
    if pairs.is_empty() {
        return Err(Error::format(0, format!("no valid question pairs ({dropped} rows dropped)")));
    }
    Ok(ParsedPairs {
        pairs,
        dropped,
        header_skipped,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub items: ItemTable,
    pub qrels: QRels,
    /// Every pair whose texts map to different items, for loss diagnostics.
    pub pairs: Vec<LabeledPair>,
    /// Label-1 pairs left out of the qrels because both sides are the same text.
    pub self_pairs_excluded: usize,
}

/// Deduplicates texts (exact match after trimming, first occurrence wins the id)
/// and turns each label-1 pair into a query → relevant entry, `text_a` → `text_b`.
pub fn build_corpus<'p>(pairs: &'p [RawPair]) -> Result<Corpus> {
    if pairs.is_empty() {
        return Err(Error::invalid("no pairs to build a corpus from"));
    }
    let mut ids: HashMap<&str, ItemId> = HashMap::new();
    let mut texts: Vec<String> = Vec::new();
    let mut intern = |t: &'p str| -> ItemId {
        let t = t.trim();
        let next = texts.len() as ItemId;
        *ids.entry(t).or_insert_with(|| {
            texts.push(t.to_string());
            next
        })
    };
    let mut id_pairs = Vec::with_capacity(pairs.len());
    for p in pairs {
        id_pairs.push((intern(&p.text_a), intern(&p.text_b), p.label));
    }

    let mut qrels = QRels::new();
    let mut labeled = Vec::new();
    let mut self_pairs_excluded = 0;
    for (a, b, label) in id_pairs {
        if a == b {
            if label == 1 {
                self_pairs_excluded += 1;
            }
            continue;
        }
        if label == 1 {
            qrels.insert(a, b)?;
        }
        labeled.push(LabeledPair::new(a, b, label)?);
    }
    Ok(Corpus {
        items: ItemTable::new(texts)?,
        qrels,
        pairs: labeled,
        self_pairs_excluded,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub embeddings: EmbeddingSet,
    pub qrels: QRels,
    /// Generating cluster of each item.
    pub labels: Vec<usize>,
}

impl SynthCorpus {
    pub fn items(&self) -> &ItemTable {
        self.embeddings.items()
    }
}

/// Gaussian mixture with pairwise mean distances of at least `10 × spread`.
///
/// Each item's relevant item is its nearest same-cluster neighbour (euclidean,
/// lower id on ties). Items of a one-point cluster get no qrels entry.
pub fn synth_corpus(
    num_clusters: usize,
    points_per_cluster: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<SynthCorpus> {
    synth_corpus_with_metric(num_clusters, points_per_cluster, dim, spread, seed, Metric::Euclidean)
}

/// [`synth_corpus`] with the oracle neighbour chosen under `metric`.
///
/// Cosine ranking ignores vector length, so a cosine oracle still holds after
/// the embeddings are normalized.
pub fn synth_corpus_with_metric(
    num_clusters: usize,
    points_per_cluster: usize,
    dim: usize,
    spread: f64,
    seed: u64,
    metric: Metric,
) -> Result<SynthCorpus> {
    if num_clusters == 0 || points_per_cluster == 0 || dim == 0 || !(spread > 0.0) {
        return Err(Error::invalid("cluster count, cluster size, dim and spread must be positive"));
    }
    let total = num_clusters
        .checked_mul(points_per_cluster)
        .filter(|&n| n <= u32::MAX as usize)
        .ok_or_else(|| Error::invalid("corpus too large"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means = separated_means(&mut rng, num_clusters, dim, 10.0 * spread);
    let noise = Normal::new(0.0, spread).map_err(|e| Error::invalid(e.to_string()))?;

    let mut data = Vec::with_capacity(total * dim);
    let mut labels = Vec::with_capacity(total);
    let mut texts = Vec::with_capacity(total);
    for (c, mean) in means.iter().enumerate() {
        for i in 0..points_per_cluster {
            data.extend(mean.iter().map(|&m| (m + noise.sample(&mut rng)) as f32));
            labels.push(c);
            texts.push(format!("cluster {c} item {i}"));
        }
    }
    let embeddings = EmbeddingSet::new(ItemTable::new(texts)?, dim, data)?;

    let mut qrels = QRels::new();
    for c in 0..num_clusters {
        let start = c * points_per_cluster;
        let members = start as ItemId..(start + points_per_cluster) as ItemId;
        for q in members.clone() {
            let nearest = members
                .clone()
                .filter(|&o| o != q)
                .map(|o| (metric.score(embeddings.vector(q), embeddings.vector(o)).1, o))
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            if let Some((_, o)) = nearest {
                qrels.insert(q, o)?;
            }
        }
    }
    Ok(SynthCorpus {
        embeddings,
        qrels,
        labels,
    })
}

/// Rejection-samples means in a cube, growing the cube until every mean fits.
fn separated_means(rng: &mut ChaCha8Rng, count: usize, dim: usize, min_dist: f64) -> Vec<Vec<f64>> {
    let min_sq = min_dist * min_dist;
    let mut side = 2.0 * min_dist * (count as f64).powf(1.0 / dim as f64);
    'restart: loop {
        let mut means: Vec<Vec<f64>> = Vec::with_capacity(count);
        while means.len() < count {
            let mut placed = false;
            for _ in 0..1000 {
                let cand: Vec<f64> = (0..dim).map(|_| rng.random_range(-side / 2.0..side / 2.0)).collect();
                let clear = means.iter().all(|m| {
                    m.iter().zip(&cand).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() >= min_sq
                });
                if clear {
                    means.push(cand);
                    placed = true;
                    break;
                }
            }
            if !placed {
                side *= 2.0;
                continue 'restart;
            }
        }
        return means;
    }
}

/// Short texts whose word overlap encodes their cluster.
///
/// Every cluster owns a private vocabulary. Items come in paraphrase pairs:
/// both halves share a core of cluster words and differ in one word, and each
/// is the other's relevant item. Embeddings are the term-frequency vectors of
/// the texts over the full vocabulary, so lexical scoring and vector geometry
/// agree.
pub fn synth_text_corpus(num_clusters: usize, pairs_per_cluster: usize, seed: u64) -> Result<SynthCorpus> {
    const VOCAB_PER_CLUSTER: usize = 24;
    const SHARED_VOCAB: usize = 8;
    const CORE_WORDS: usize = 5;
    if num_clusters == 0 || pairs_per_cluster == 0 {
        return Err(Error::invalid("cluster count and pair count must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = num_clusters * VOCAB_PER_CLUSTER + SHARED_VOCAB;
    let word = |index: usize| -> String {
        if index < SHARED_VOCAB {
            format!("common{index}")
        } else {
            let local = index - SHARED_VOCAB;
            format!("c{}w{}", local / VOCAB_PER_CLUSTER, local % VOCAB_PER_CLUSTER)
        }
    };

    let mut texts = Vec::new();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut qrels = QRels::new();
    for c in 0..num_clusters {
        let base = SHARED_VOCAB + c * VOCAB_PER_CLUSTER;
        let mut pool: Vec<usize> = (base..base + VOCAB_PER_CLUSTER).collect();
        for _ in 0..pairs_per_cluster {
            pool.shuffle(&mut rng);
            let core = &pool[..CORE_WORDS];
            let common = rng.random_range(0..SHARED_VOCAB);
            for extra in [pool[CORE_WORDS], pool[CORE_WORDS + 1]] {
                let mut words: Vec<usize> = core.to_vec();
                words.push(extra);
                words.push(common);
                let id = texts.len() as ItemId;
                texts.push(words.iter().map(|&w| word(w)).collect::<Vec<_>>().join(" "));
                let mut row = vec![0f32; dim];
                for &w in &words {
                    row[w] += 1.0;
                }
                data.extend(row);
                labels.push(c);
                let partner = if id.is_multiple_of(2) { id + 1 } else { id - 1 };
                qrels.insert(id, partner)?;
            }
        }
    }
    let embeddings = EmbeddingSet::new(ItemTable::new(texts)?, dim, data)?;
    Ok(SynthCorpus {
        embeddings,
        qrels,
        labels,
    })
}
