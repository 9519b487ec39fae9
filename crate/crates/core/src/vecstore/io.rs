//! Items TSV, pairs TSV and the `EMB1` embedding binary.

use std::fs;
use std::path::Path;

use super::{DenseMatrix, EmbeddingSet, ItemId, ItemTable, LabeledPair, PointSet};
use crate::binfmt::{put_f32s, put_u32, Cursor};
use crate::error::{Error, Result};

const EMB_MAGIC: &[u8; 4] = b"EMB1";

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Yields `(byte offset, line)` for each LF-terminated line; a missing final LF is tolerated.
fn lines_with_offsets(text: &str) -> impl Iterator<Item = (u64, &str)> {
    let mut offset = 0u64;
    text.split_inclusive('\n').map(move |raw| {
        let start = offset;
        offset += raw.len() as u64;
        (start, raw.strip_suffix('\n').unwrap_or(raw))
    })
}

pub fn load_items(path: impl AsRef<Path>) -> Result<ItemTable> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let mut texts = Vec::new();
    for (offset, line) in lines_with_offsets(&text) {
        let (id, body) = line
            .split_once('\t')
            .ok_or_else(|| Error::format(offset, "items row lacks a tab separator"))?;
        let id: usize = id
            .parse()
            .map_err(|_| Error::format(offset, format!("bad item id {id:?}")))?;
        if id != texts.len() {
            return Err(Error::format(
                offset,
                format!("expected item id {}, found {id}", texts.len()),
            ));
        }
        if body.trim().is_empty() {
            return Err(Error::format(offset, format!("item {id} has empty text")));
        }
        texts.push(body.to_string());
    }
    ItemTable::new(texts)
}

pub fn save_items(items: &ItemTable, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    for (id, text) in items.iter() {
        if text.contains(['\t', '\n', '\r']) {
            return Err(Error::invalid(format!(
                "item {id} text contains a tab or line break and cannot be written as TSV"
            )));
        }
        out.push_str(&id.to_string());
        out.push('\t');
        out.push_str(text);
        out.push('\n');
    }
    fs::write(path.as_ref(), out).map_err(|e| Error::io(path, e))
}

/// Reads an `EMB1` file without an item table.
pub fn read_embeddings(path: impl AsRef<Path>) -> Result<DenseMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embeddings(&bytes)
}

fn decode_embeddings(bytes: &[u8]) -> Result<DenseMatrix> {
    let mut cur = Cursor::new(bytes);
    cur.expect_magic(EMB_MAGIC)?;
    let count = cur.u32("count")? as usize;
    let dim_offset = cur.offset();
    let dim = cur.u32("dim")? as usize;
    if dim == 0 {
        return Err(Error::format(dim_offset, "dim must be positive"));
    }
    let expected = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::format(dim_offset, "count × dim overflows"))?;
    if cur.remaining() < expected {
        return Err(Error::format(
            cur.offset() + cur.remaining() as u64,
            format!(
                "header declares {count} rows of dim {dim} ({expected} bytes) but only {} bytes follow",
                cur.remaining()
            ),
        ));
    }
    let mut data = Vec::with_capacity(count * dim);
    cur.f32_into(count * dim, &mut data, "vectors")?;
    if cur.remaining() != 0 {
        return Err(Error::format(
            cur.offset(),
            format!("{} trailing bytes after vectors", cur.remaining()),
        ));
    }
    DenseMatrix::new(dim, data)
}

/// Loads embeddings and pairs them with `items`; row `i` belongs to item `i`.
pub fn load_embeddings(path: impl AsRef<Path>, items: ItemTable) -> Result<EmbeddingSet> {
    let m = read_embeddings(path)?;
    if m.len() != items.len() {
        return Err(Error::Consistency(format!(
            "embedding file has {} vectors but item table has {} items",
            m.len(),
            items.len()
        )));
    }
    let dim = m.dim();
    EmbeddingSet::new(items, dim, m.as_slice().to_vec())
}

pub fn encode_embeddings(count: usize, dim: usize, vectors: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + vectors.len() * 4);
    out.extend_from_slice(EMB_MAGIC);
    put_u32(&mut out, count as u32);
    put_u32(&mut out, dim as u32);
    put_f32s(&mut out, vectors);
    out
}

pub fn save_embeddings(set: &EmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_embeddings(set.len(), set.dim(), set.as_slice());
    fs::write(path.as_ref(), bytes).map_err(|e| Error::io(path, e))
}

pub fn load_pairs(path: impl AsRef<Path>) -> Result<Vec<LabeledPair>> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let mut pairs = Vec::new();
    for (offset, line) in lines_with_offsets(&text) {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::format(offset, format!("expected 3 columns, found {}", cols.len())));
        }
        let parse_id = |s: &str| -> Result<ItemId> {
            s.parse().map_err(|_| Error::format(offset, format!("bad item id {s:?}")))
        };
        let label: u8 = cols[2]
            .parse()
            .map_err(|_| Error::format(offset, format!("bad label {:?}", cols[2])))?;
        let pair = LabeledPair::new(parse_id(cols[0])?, parse_id(cols[1])?, label)
            .map_err(|e| Error::format(offset, e.to_string()))?;
        pairs.push(pair);
    }
    Ok(pairs)
}

pub fn save_pairs(pairs: &[LabeledPair], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&format!("{}\t{}\t{}\n", p.id_a, p.id_b, p.label));
    }
    fs::write(path.as_ref(), out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(n: usize) -> ItemTable {
        ItemTable::new((0..n).map(|i| format!("question {i}?")).collect()).unwrap()
    }

    #[test]
    fn embeddings_round_trip_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.emb");
        let data = vec![
            0.1, -2.5, f32::MIN_POSITIVE, 3.0e-39, 1.0, 2.0, 3.0, 4.0, -0.0, 7.25, 1e30, -1e-30,
        ];
        let set = EmbeddingSet::new(table(3), 4, data.clone()).unwrap();
        save_embeddings(&set, &path).unwrap();
        let back = load_embeddings(&path, table(3)).unwrap();
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(back.as_slice()), bits(&data));
        assert_eq!(back.dim(), 4);
    }

    #[test]
    fn truncated_embedding_file_is_format_error() {
        let bytes = encode_embeddings(2, 3, &[1.0, 2.0, 3.0]);
        match decode_embeddings(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 24),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_magic_is_format_error() {
        let mut bytes = encode_embeddings(1, 1, &[1.0]);
        bytes[0] = b'X';
        assert!(matches!(decode_embeddings(&bytes), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(decode_embeddings(b"EM"), Err(Error::Format { .. })));
    }

    #[test]
    fn count_mismatch_is_consistency_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.emb");
        fs::write(&path, encode_embeddings(4, 2, &[0.5; 8])).unwrap();
        assert!(matches!(load_embeddings(&path, table(5)), Err(Error::Consistency(_))));
    }

    #[test]
    fn items_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("items.tsv");
        let t = table(4);
        save_items(&t, &path).unwrap();
        assert_eq!(load_items(&path).unwrap(), t);

        fs::write(&path, "0\tfirst\n2\tskipped\n").unwrap();
        match load_items(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 8),
            other => panic!("unexpected {other:?}"),
        }
        fs::write(&path, "0\tno trailing newline").unwrap();
        assert_eq!(load_items(&path).unwrap().len(), 1);
    }

    #[test]
    fn pairs_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.tsv");
        let pairs = vec![LabeledPair::new(0, 1, 1).unwrap(), LabeledPair::new(2, 0, 0).unwrap()];
        save_pairs(&pairs, &path).unwrap();
        assert_eq!(load_pairs(&path).unwrap(), pairs);
        fs::write(&path, "0\t1\t3\n").unwrap();
        assert!(matches!(load_pairs(&path), Err(Error::Format { .. })));
    }
}
