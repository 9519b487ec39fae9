//! Corpus storage and vector primitives.
//!
//! Items are addressed by dense `ItemId`s (row indices). Vectors are stored as
//! `f32` in a single row-major buffer; every reduction accumulates in `f64`.

mod io;

pub use io::{
    encode_embeddings, load_embeddings, load_items, load_pairs, read_embeddings, save_embeddings, save_items,
    save_pairs,
};

use crate::error::{Error, Result};

/// Dense row index of a corpus item.
pub type ItemId = u32;

/// The ordered question set. Item `i` is the `i`-th entry.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ItemTable {
    texts: Vec<String>,
}

impl ItemTable {
    /// Builds a table whose ids are the positions in `texts`.
    pub fn new(texts: Vec<String>) -> Result<Self> {
        if texts.len() > u32::MAX as usize {
            return Err(Error::invalid("item count exceeds u32 range"));
        }
        for (i, t) in texts.iter().enumerate() {
            if t.trim().is_empty() {
                return Err(Error::invalid(format!("item {i} has empty text")));
            }
        }
        Ok(Self { texts })
    }

    /// Builds a table from explicit `(id, text)` entries; ids must be exactly `0..n` in order.
    pub fn from_entries(entries: Vec<(ItemId, String)>) -> Result<Self> {
        let mut texts = Vec::with_capacity(entries.len());
        for (pos, (id, text)) in entries.into_iter().enumerate() {
            if id as usize != pos {
                return Err(Error::invalid(format!("expected item id {pos}, found {id}")));
            }
            texts.push(text);
        }
        Self::new(texts)
    }

    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    pub fn text(&self, id: ItemId) -> Option<&str> {
        self.texts.get(id as usize).map(String::as_str)
    }

    pub fn texts(&self) -> &[String] {
        &self.texts
    }

    pub fn iter(&self) -> impl Iterator<Item = (ItemId, &str)> {
        self.texts.iter().enumerate().map(|(i, t)| (i as ItemId, t.as_str()))
    }
}

/// Read access to a set of equal-length vectors.
pub trait PointSet {
    fn dim(&self) -> usize;
    fn len(&self) -> usize;
    fn point(&self, index: usize) -> &[f32];

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A plain row-major matrix of `f32` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    dim: usize,
    data: Vec<f32>,
}

impl DenseMatrix {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dimension must be positive"));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::invalid(format!(
                "buffer of length {} is not a multiple of dim {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        if dim == 0 {
            return Err(Error::invalid("matrix needs at least one non-empty row"));
        }
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::invalid(format!("row {i} has dim {} != {dim}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { dim, data })
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }
}

impl PointSet for DenseMatrix {
    fn dim(&self) -> usize {
        self.dim
    }
    fn len(&self) -> usize {
        self.data.len() / self.dim
    }
    fn point(&self, index: usize) -> &[f32] {
        &self.data[index * self.dim..(index + 1) * self.dim]
    }
}

/// Item table plus one embedding row per item.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    items: ItemTable,
    dim: usize,
    vectors: Vec<f32>,
    normalized: bool,
}

impl EmbeddingSet {
    pub fn new(items: ItemTable, dim: usize, vectors: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dimension must be positive"));
        }
        if vectors.len() != items.len() * dim {
            return Err(Error::Consistency(format!(
                "{} items but {} floats for dim {dim}",
                items.len(),
                vectors.len()
            )));
        }
        if let Some(pos) = vectors.iter().position(|x| !x.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite value in row {} column {}",
                pos / dim,
                pos % dim
            )));
        }
        Ok(Self {
            items,
            dim,
            vectors,
            normalized: false,
        })
    }

    pub fn items(&self) -> &ItemTable {
        &self.items
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Embedding row for `id`. Panics if `id` is out of range.
    pub fn vector(&self, id: ItemId) -> &[f32] {
        let start = id as usize * self.dim;
        &self.vectors[start..start + self.dim]
    }

    pub fn get(&self, id: ItemId) -> Option<&[f32]> {
        ((id as usize) < self.len()).then(|| self.vector(id))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.vectors
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.vectors.chunks_exact(self.dim)
    }

    /// Returns a copy with every row scaled to unit L2 norm.
    pub fn normalize(&self) -> Result<EmbeddingSet> {
        let mut out = Vec::with_capacity(self.vectors.len());
        for (id, row) in self.rows().enumerate() {
            let norm = dot(row, row).sqrt();
            if norm == 0.0 {
                return Err(Error::Domain(format!("item {id} has a zero-norm embedding")));
            }
            out.extend(row.iter().map(|&x| (x as f64 / norm) as f32));
        }
        Ok(EmbeddingSet {
            items: self.items.clone(),
            dim: self.dim,
            vectors: out,
            normalized: true,
        })
    }
}

impl PointSet for EmbeddingSet {
    fn dim(&self) -> usize {
        self.dim
    }
    fn len(&self) -> usize {
        self.items.len()
    }
    fn point(&self, index: usize) -> &[f32] {
        self.vector(index as ItemId)
    }
}

/// A subset of another point set, addressed through an id list.
pub struct Subset<'a, P: ?Sized> {
    base: &'a P,
    ids: &'a [ItemId],
}

impl<'a, P: PointSet + ?Sized> Subset<'a, P> {
    pub fn new(base: &'a P, ids: &'a [ItemId]) -> Self {
        Self { base, ids }
    }

    pub fn ids(&self) -> &[ItemId] {
        self.ids
    }
}

impl<P: PointSet + ?Sized> PointSet for Subset<'_, P> {
    fn dim(&self) -> usize {
        self.base.dim()
    }
    fn len(&self) -> usize {
        self.ids.len()
    }
    fn point(&self, index: usize) -> &[f32] {
        self.base.point(self.ids[index] as usize)
    }
}

/// Output vectors of the last encoder layer for one sentence, one row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    dim: usize,
    data: Vec<f32>,
}

impl TokenMatrix {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || data.is_empty() {
            return Err(Error::invalid("token matrix needs at least one row of positive dim"));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::invalid("token buffer is not a whole number of rows"));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("token matrix contains non-finite values"));
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let m = DenseMatrix::from_rows(rows)?;
        Self::new(m.dim, m.data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn token_count(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }
}

/// How token vectors are reduced to one sentence vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    /// Row 0, the classification-token position.
    First,
    Mean,
    Max,
}

impl std::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first" | "cls" => Ok(Pooling::First),
            "mean" => Ok(Pooling::Mean),
            "max" => Ok(Pooling::Max),
            other => Err(Error::invalid(format!("unknown pooling strategy {other:?}"))),
        }
    }
}

pub fn pool(tokens: &TokenMatrix, strategy: Pooling) -> Vec<f32> {
    let mut rows = tokens.rows();
    // TokenMatrix guarantees at least one row.
    let first = rows.next().expect("token matrix is non-empty");
    match strategy {
        Pooling::First => first.to_vec(),
        Pooling::Max => {
            let mut acc = first.to_vec();
            for row in rows {
                for (a, &x) in acc.iter_mut().zip(row) {
                    if x > *a {
                        *a = x;
                    }
                }
            }
            acc
        }
        Pooling::Mean => {
            let mut acc: Vec<f64> = first.iter().map(|&x| x as f64).collect();
            for row in rows {
                for (a, &x) in acc.iter_mut().zip(row) {
                    *a += x as f64;
                }
            }
            let n = tokens.token_count() as f64;
            acc.into_iter().map(|a| (a / n) as f32).collect()
        }
    }
}

#[inline]
pub(crate) fn dot(u: &[f32], v: &[f32]) -> f64 {
    u.iter().zip(v).map(|(&a, &b)| a as f64 * b as f64).sum()
}

/// Squared L2 distance, accumulated in `f64`. Callers check dimensions.
#[inline]
pub(crate) fn squared_euclidean(u: &[f32], v: &[f32]) -> f64 {
    u.iter()
        .zip(v)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum()
}

/// Cosine with caller-checked dimensions. Returns `None` for a zero-norm input.
#[inline]
pub(crate) fn cosine_unchecked(u: &[f32], v: &[f32]) -> Option<f64> {
    let nu = dot(u, u);
    let nv = dot(v, v);
    if nu == 0.0 || nv == 0.0 {
        return None;
    }
    Some((dot(u, v) / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0))
}

fn check_dims(u: &[f32], v: &[f32]) -> Result<()> {
    if u.len() != v.len() {
        return Err(Error::invalid(format!("dimension mismatch: {} vs {}", u.len(), v.len())));
    }
    Ok(())
}

pub fn cosine_similarity(u: &[f32], v: &[f32]) -> Result<f64> {
    check_dims(u, v)?;
    cosine_unchecked(u, v).ok_or_else(|| Error::Domain("cosine of a zero-norm vector".into()))
}

pub fn euclidean_distance(u: &[f32], v: &[f32]) -> Result<f64> {
    check_dims(u, v)?;
    Ok(squared_euclidean(u, v).sqrt())
}

/// A pair of corpus items with a binary similarity label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LabeledPair {
    pub id_a: ItemId,
    pub id_b: ItemId,
    pub label: u8,
}

impl LabeledPair {
    pub fn new(id_a: ItemId, id_b: ItemId, label: u8) -> Result<Self> {
        if label > 1 {
            return Err(Error::invalid(format!("label must be 0 or 1, got {label}")));
        }
        if id_a == id_b {
            return Err(Error::invalid(format!("pair references item {id_a} twice")));
        }
        Ok(Self { id_a, id_b, label })
    }
}

/// Mean squared error between pair cosine similarities and their labels.
///
/// This is the objective the sentence encoder is fine-tuned with; here it
/// serves as a quality diagnostic for imported embeddings.
pub fn cosine_mse_loss(embeddings: &EmbeddingSet, pairs: &[LabeledPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("no pairs given"));
    }
    let mut total = 0.0;
    for p in pairs {
        let u = embeddings
            .get(p.id_a)
            .ok_or_else(|| Error::invalid(format!("unknown item id {}", p.id_a)))?;
        let v = embeddings
            .get(p.id_b)
            .ok_or_else(|| Error::invalid(format!("unknown item id {}", p.id_b)))?;
        let cos = cosine_unchecked(u, v).ok_or_else(|| {
            Error::Domain(format!("zero-norm vector in pair ({}, {})", p.id_a, p.id_b))
        })?;
        let err = cos - p.label as f64;
        total += err * err;
    }
    Ok(total / pairs.len() as f64)
}
