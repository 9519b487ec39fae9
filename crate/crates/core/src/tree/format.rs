//! `KTR1` tree file: little-endian header followed by pre-order node records.
//!
//! ```text
//! "KTR1" branching:u32 leaf_capacity:u32 dim:u32 item_count:u32 rep_count:u32
//! leaf:     0u8 count:u32 ids:[u32; count]
//! internal: 1u8 centroid:[f32; dim] reps:u8 rep_ids:[u32; reps] children:u8 <children...>
//! ```

use std::fs;
use std::path::Path;

use super::{KTree, TreeNode};
use crate::binfmt::{put_f32s, put_u32, Cursor};
use crate::error::{Error, Result};
use crate::vecstore::ItemId;

const MAGIC: &[u8; 4] = b"KTR1";
const TAG_LEAF: u8 = 0;
const TAG_INTERNAL: u8 = 1;
/// Nesting limit when reading; real trees are a few dozen levels at most.
const MAX_READ_DEPTH: usize = 1024;

pub fn encode_tree(tree: &KTree) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    for v in [tree.branching, tree.leaf_capacity, tree.dim, tree.item_count, tree.rep_count] {
        put_u32(&mut out, to_u32(v, "header field")?);
    }
    encode_node(&tree.root, tree.dim, &mut out)?;
    Ok(out)
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::invalid(format!("{what} {v} does not fit in u32")))
}

fn to_u8(v: usize, what: &str) -> Result<u8> {
    u8::try_from(v).map_err(|_| Error::invalid(format!("{what} {v} does not fit in u8")))
}

fn encode_node(node: &TreeNode, dim: usize, out: &mut Vec<u8>) -> Result<()> {
    match node {
        TreeNode::Leaf { member_ids } => {
            out.push(TAG_LEAF);
            put_u32(out, to_u32(member_ids.len(), "leaf size")?);
            for &id in member_ids {
                put_u32(out, id);
            }
        }
        TreeNode::Internal { centroid, children, rep_ids } => {
            if centroid.len() != dim {
                return Err(Error::invalid("centroid dimension differs from tree dim"));
            }
            out.push(TAG_INTERNAL);
            put_f32s(out, centroid);
            out.push(to_u8(rep_ids.len(), "representative count")?);
            for &id in rep_ids {
                put_u32(out, id);
            }
            out.push(to_u8(children.len(), "child count")?);
            for child in children {
                encode_node(child, dim, out)?;
            }
        }
    }
    Ok(())
}

struct Pending {
    centroid: Vec<f32>,
    rep_ids: Vec<ItemId>,
    expected: usize,
    children: Vec<TreeNode>,
}

pub fn decode_tree(bytes: &[u8]) -> Result<KTree> {
    let mut cur = Cursor::new(bytes);
    cur.expect_magic(MAGIC)?;
    let branching = cur.u32("branching")? as usize;
    let leaf_capacity = cur.u32("leaf_capacity")? as usize;
    let dim_offset = cur.offset();
    let dim = cur.u32("dim")? as usize;
    let item_count = cur.u32("item_count")? as usize;
    let rep_count = cur.u32("rep_count")? as usize;
    if dim == 0 {
        return Err(Error::format(dim_offset, "dim must be positive"));
    }
    if branching < 2 || leaf_capacity == 0 {
        return Err(Error::format(4, "branching must be ≥ 2 and leaf_capacity ≥ 1"));
    }

    let mut seen = vec![false; item_count];
    let check_id = |id: ItemId, offset: u64| -> Result<()> {
        if id as usize >= item_count {
            return Err(Error::format(offset, format!("item id {id} out of range 0..{item_count}")));
        }
        Ok(())
    };

    let mut stack: Vec<Pending> = Vec::new();
    let root = loop {
        let node_offset = cur.offset();
        let mut node = match cur.u8("node tag")? {
            TAG_LEAF => {
                let count = cur.u32("leaf size")? as usize;
                if count == 0 || count > item_count {
                    return Err(Error::format(node_offset, format!("invalid leaf size {count}")));
                }
                let mut member_ids = Vec::with_capacity(count);
                for _ in 0..count {
                    let at = cur.offset();
                    let id = cur.u32("leaf member")?;
                    check_id(id, at)?;
                    if std::mem::replace(&mut seen[id as usize], true) {
                        return Err(Error::format(at, format!("item {id} appears in two leaves")));
                    }
                    member_ids.push(id);
                }
                TreeNode::Leaf { member_ids }
            }
            TAG_INTERNAL => {
                if stack.len() >= MAX_READ_DEPTH {
                    return Err(Error::format(node_offset, "tree nesting exceeds read limit"));
                }
                let mut centroid = Vec::with_capacity(dim);
                cur.f32_into(dim, &mut centroid, "centroid")?;
                let reps_offset = cur.offset();
                let reps = cur.u8("representative count")? as usize;
                if reps > rep_count {
                    return Err(Error::format(
                        reps_offset,
                        format!("{reps} representatives exceed header rep_count {rep_count}"),
                    ));
                }
                let mut rep_ids = Vec::with_capacity(reps);
                for _ in 0..reps {
                    let at = cur.offset();
                    let id = cur.u32("representative id")?;
                    check_id(id, at)?;
                    rep_ids.push(id);
                }
                let count_offset = cur.offset();
                let expected = cur.u8("child count")? as usize;
                if expected == 0 || expected > branching {
                    return Err(Error::format(
                        count_offset,
                        format!("child count {expected} outside 1..={branching}"),
                    ));
                }
                stack.push(Pending {
                    centroid,
                    rep_ids,
                    expected,
                    children: Vec::with_capacity(expected),
                });
                continue;
            }
            other => {
                return Err(Error::format(node_offset, format!("unknown node tag {other}")));
            }
        };
        // Attach the finished node, closing every parent it completes.
        let finished = loop {
            let Some(parent) = stack.last_mut() else {
                break Some(node);
            };
            parent.children.push(node);
            if parent.children.len() < parent.expected {
                break None;
            }
            let done = stack.pop().expect("parent exists");
            node = TreeNode::Internal {
                centroid: done.centroid,
                children: done.children,
                rep_ids: done.rep_ids,
            };
        };
        if let Some(root) = finished {
            break root;
        }
    };

    if cur.remaining() != 0 {
        return Err(Error::format(cur.offset(), format!("{} trailing bytes", cur.remaining())));
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::format(
            cur.offset(),
            format!("item {missing} is not stored in any leaf"),
        ));
    }
    Ok(KTree {
        depth: root.depth(),
        root,
        branching,
        leaf_capacity,
        dim,
        item_count,
        rep_count,
    })
}

pub fn serialize_tree(tree: &KTree, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_tree(tree)?;
    fs::write(path.as_ref(), bytes).map_err(|e| Error::io(path, e))
}

pub fn deserialize_tree(path: impl AsRef<Path>) -> Result<KTree> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tree(&bytes)
}
