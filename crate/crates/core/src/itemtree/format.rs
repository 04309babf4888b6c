//! Tree file format.
//!
//! A tree is stored as one UTF-8 JSON document:
//!
//! ```text
//! {
//!   "format": "cistree-item-tree",
//!   "version": 1,
//!   "arity": 2,
//!   "dim": 25,
//!   "item_count": 10677,
//!   "config_hash": "…",            // optional
//!   "nodes": [
//!     {"parent": null, "child": 0, "item": null, "params": "<base64>"},
//!     {"parent": 0,    "child": 1, "item": null, "params": "<base64>"},
//!     …
//!   ]
//! }
//! ```
//!
//! Nodes are listed in pre-order starting at the root, so a node's parent
//! always precedes it and siblings appear in child order. `child` is the
//! 1-based position under the parent (0 for the root) and `item` is present
//! exactly on leaves. `params` is the base64 (standard alphabet, padded)
//! encoding of `dim + 1` little-endian IEEE-754 doubles: the factor vector
//! followed by the bias. Trees with equal topology and parameters serialize to
//! identical bytes regardless of how they were built.

use serde::{Deserialize, Serialize};

use super::{ItemTree, NodeId, TreeBuilder};
use crate::params::{decode_f64s, encode_f64s};
use crate::{Error, ItemId, Result};

const FORMAT_TAG: &str = "cistree-item-tree";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TreeDocument {
    format: String,
    version: u32,
    arity: usize,
    dim: usize,
    item_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
    nodes: Vec<NodeRecord>,
}

#[derive(Serialize, Deserialize)]
struct NodeRecord {
    parent: Option<usize>,
    child: u32,
    item: Option<ItemId>,
    params: String,
}

pub fn serialize(tree: &ItemTree) -> Vec<u8> {
    serialize_with_hash(tree, None)
}

pub fn serialize_with_hash(tree: &ItemTree, config_hash: Option<&str>) -> Vec<u8> {
    let mut nodes = Vec::with_capacity(tree.node_count());
    let mut stack: Vec<(NodeId, Option<usize>, u32)> = vec![(tree.root(), None, 0)];
    let mut param_buf = Vec::with_capacity(tree.dim() + 1);
    while let Some((node, parent, child)) = stack.pop() {
        let my_index = nodes.len();
        param_buf.clear();
        param_buf.extend_from_slice(tree.factor(node));
        param_buf.push(tree.bias(node));
        nodes.push(NodeRecord {
            parent,
            child,
            item: if tree.is_leaf(node) { tree.item_at(node) } else { None },
            params: encode_f64s(&param_buf),
        });
        for (k, &c) in tree.children(node).iter().enumerate().rev() {
            stack.push((c, Some(my_index), k as u32 + 1));
        }
    }
    let doc = TreeDocument {
        format: FORMAT_TAG.to_string(),
        version: VERSION,
        arity: tree.arity(),
        dim: tree.dim(),
        item_count: tree.item_count(),
        config_hash: config_hash.map(str::to_string),
        nodes,
    };
    let mut out = serde_json::to_vec(&doc).expect("tree document serializes");
    out.push(b'\n');
    out
}

pub fn deserialize(bytes: &[u8]) -> Result<ItemTree> {
    deserialize_with_hash(bytes).map(|(t, _)| t)
}

/// Parses a tree file. Topology and parameter blocks are checked here;
/// item-placement invariants are left to [`super::validate`].
pub fn deserialize_with_hash(bytes: &[u8]) -> Result<(ItemTree, Option<String>)> {
    let doc: TreeDocument = serde_json::from_slice(bytes).map_err(|e| Error::Format {
        offset: byte_offset(bytes, e.line(), e.column()),
        message: e.to_string(),
    })?;
    let fail = |node: usize, message: String| Error::Format {
        offset: node_offset(bytes, node),
        message: format!("node {node}: {message}"),
    };
    if doc.format != FORMAT_TAG || doc.version != VERSION {
        return Err(Error::Format {
            offset: 0,
            message: format!("unsupported document `{}` v{}", doc.format, doc.version),
        });
    }
    if doc.nodes.is_empty() {
        return Err(Error::Format { offset: 0, message: "no nodes".into() });
    }
    let mut b = TreeBuilder::new(doc.arity, doc.dim);
    let mut seen_children: Vec<u32> = vec![0; doc.nodes.len()];
    for (idx, rec) in doc.nodes.iter().enumerate() {
        let params = decode_f64s(&rec.params)
            .filter(|p| p.len() == doc.dim + 1)
            .ok_or_else(|| fail(idx, "malformed parameter block".into()))?;
        let (factor, bias) = params.split_at(doc.dim);
        let node = match (idx, rec.parent) {
            (0, None) => {
                b.set_root_params(factor, bias[0]);
                0
            }
            (0, Some(_)) => return Err(fail(idx, "first node must be the root".into())),
            (_, None) => return Err(fail(idx, "only the first node may lack a parent".into())),
            (_, Some(p)) if p >= idx => return Err(fail(idx, format!("parent {p} does not precede node"))),
            (_, Some(p)) => {
                seen_children[p] += 1;
                if rec.child != seen_children[p] {
                    return Err(fail(idx, format!("child position {} out of order", rec.child)));
                }
                b.add_child(p, factor, bias[0])
            }
        };
        if let Some(item) = rec.item {
            if item as usize >= doc.item_count {
                return Err(fail(idx, format!("item {item} outside item count {}", doc.item_count)));
            }
            b.set_item(node, item);
        }
    }
    Ok((b.finish(doc.item_count), doc.config_hash))
}

fn byte_offset(bytes: &[u8], line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut current = 1;
    for (pos, &c) in bytes.iter().enumerate() {
        if current == line {
            return (pos + column.saturating_sub(1)).min(bytes.len());
        }
        if c == b'\n' {
            current += 1;
        }
    }
    bytes.len()
}

fn node_offset(bytes: &[u8], node: usize) -> usize {
    let needle = b"\"parent\"";
    bytes
        .windows(needle.len())
        .enumerate()
        .filter(|(_, w)| *w == needle)
        .nth(node)
        .map_or(0, |(pos, _)| pos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::itemtree::validate;
    use crate::linalg::rng_from_seed;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_tree(n: usize, k: usize, d: usize, seed: u64) -> ItemTree {
        let mut t = ItemTree::random_balanced(n, k, d, seed).unwrap();
        let mut rng = rng_from_seed(seed ^ 77);
        for node in 0..t.node_count() {
            for v in t.factor_mut(node) {
                *v = rng.random_range(-3.0..3.0);
            }
            *t.bias_mut(node) = rng.random_range(-3.0..3.0);
        }
        t
    }

    proptest! {
        #[test]
        fn round_trip_is_exact(n in 1usize..200, k in 2usize..6, d in 1usize..6, seed: u64) {
            let t = random_tree(n, k, d, seed);
            let bytes = serialize(&t);
            let back = deserialize(&bytes).unwrap();
            prop_assert!(validate(&back).is_empty());
            prop_assert_eq!(serialize(&back), bytes);
            let user: Vec<f64> = (0..d).map(|j| j as f64 * 0.3 - 0.5).collect();
            for item in 0..n as ItemId {
                prop_assert_eq!(back.code_of(item).unwrap(), t.code_of(item).unwrap());
                prop_assert_eq!(
                    back.item_log_prob(&user, item).unwrap().to_bits(),
                    t.item_log_prob(&user, item).unwrap().to_bits()
                );
            }
        }
    }

    #[test]
    fn identical_trees_give_identical_bytes() {
        let a = random_tree(37, 3, 4, 5);
        let b = random_tree(37, 3, 4, 5);
        assert_eq!(serialize(&a), serialize(&b));
        // same tree, non-pre-order construction
        let mut b2 = TreeBuilder::new(2, 1);
        let l = b2.add_child(0, &[1.0], 0.0);
        let r = b2.add_child(0, &[2.0], 0.5);
        let ll = b2.add_child(l, &[3.0], 0.0);
        let lr = b2.add_child(l, &[4.0], 0.0);
        b2.set_item(r, 2);
        b2.set_item(ll, 0);
        b2.set_item(lr, 1);
        let t1 = b2.finish(3);
        let reparsed = deserialize(&serialize(&t1)).unwrap();
        // reparsed tree numbers nodes in pre-order, the original does not
        assert_ne!(reparsed, t1);
        assert_eq!(serialize(&reparsed), serialize(&t1));
    }

    #[test]
    fn truncated_stream_is_format_error() {
        let bytes = serialize(&random_tree(10, 2, 2, 1));
        let err = deserialize(&bytes[..bytes.len() / 2]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
        assert!(matches!(deserialize(b""), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn bad_param_block_names_node() {
        let t = random_tree(4, 2, 2, 1);
        let text = String::from_utf8(serialize(&t)).unwrap();
        let first = text.find("\"params\":\"").unwrap();
        let second = first + 10 + text[first + 10..].find("\"params\":\"").unwrap();
        let mut broken = text.clone();
        broken.replace_range(second + 10..second + 14, "!!!!");
        match deserialize(broken.as_bytes()) {
            Err(Error::Format { offset, message }) => {
                assert!(message.contains("node 1"), "{message}");
                assert!(offset > 0 && offset < second);
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn config_hash_is_carried() {
        let t = random_tree(3, 2, 1, 1);
        let bytes = serialize_with_hash(&t, Some("abc123"));
        let (_, hash) = deserialize_with_hash(&bytes).unwrap();
        assert_eq!(hash.as_deref(), Some("abc123"));
    }
}
