//! K-ary item trees with one item per leaf.
//!
//! Every non-root node carries a factor vector `Q_n` and bias `b_n`. A user
//! with factor vector `U_u` walks from the root choosing child `k` of node `n`
//! with probability `softmax_k(U_u·Q_c + b_c)` over the children `c` of `n`,
//! and the probability of an item is the product of the choices along its
//! root-to-leaf path.

mod format;

pub use format::{deserialize, deserialize_with_hash, serialize, serialize_with_hash};

use std::fmt;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};

use crate::linalg::{dot, log_sum_exp, rng_from_seed};
use crate::{Error, ItemId, Result};

pub type NodeId = usize;

/// Standard deviation of the initial node factor vectors.
pub const INIT_FACTOR_STD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
struct Node {
    parent: Option<NodeId>,
    children: Vec<NodeId>,
    item: Option<ItemId>,
}

/// Root-to-leaf child indices of an item, each in `1..=K`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ItemCode(Vec<u32>);

impl ItemCode {
    pub fn digits(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItemTree {
    arity: usize,
    dim: usize,
    item_count: usize,
    nodes: Vec<Node>,
    factors: Vec<f64>,
    biases: Vec<f64>,
    item_leaf: Vec<Option<NodeId>>,
    codes: Vec<Option<ItemCode>>,
}

/// Incremental tree construction. Node 0 is the root.
#[derive(Debug, Clone)]
pub struct TreeBuilder {
    arity: usize,
    dim: usize,
    nodes: Vec<Node>,
    factors: Vec<f64>,
    biases: Vec<f64>,
}

impl TreeBuilder {
    pub fn new(arity: usize, dim: usize) -> Self {
        TreeBuilder {
            arity,
            dim,
            nodes: vec![Node { parent: None, children: Vec::new(), item: None }],
            factors: vec![0.0; dim],
            biases: vec![0.0],
        }
    }

    pub fn root(&self) -> NodeId {
        0
    }

    pub fn add_child(&mut self, parent: NodeId, factor: &[f64], bias: f64) -> NodeId {
        assert_eq!(factor.len(), self.dim, "factor dimension mismatch");
        let id = self.nodes.len();
        self.nodes.push(Node { parent: Some(parent), children: Vec::new(), item: None });
        self.nodes[parent].children.push(id);
        self.factors.extend_from_slice(factor);
        self.biases.push(bias);
        id
    }

    pub fn set_item(&mut self, node: NodeId, item: ItemId) {
        self.nodes[node].item = Some(item);
    }

    pub fn set_root_params(&mut self, factor: &[f64], bias: f64) {
        self.factors[..self.dim].copy_from_slice(factor);
        self.biases[0] = bias;
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Finishes construction. Structural problems are not rejected here;
    /// run [`validate`] on the result.
    pub fn finish(self, item_count: usize) -> ItemTree {
        let mut tree = ItemTree {
            arity: self.arity,
            dim: self.dim,
            item_count,
            nodes: self.nodes,
            factors: self.factors,
            biases: self.biases,
            item_leaf: vec![None; item_count],
            codes: vec![None; item_count],
        };
        tree.rebuild_codes();
        tree
    }
}

impl ItemTree {
    /// Complete K-ary tree of minimal height over shuffled items.
    ///
    /// Leaves sit on the last two levels only, and the expanded nodes of the
    /// second-to-last level are packed to the left. A single item hangs below
    /// the root so that every code has at least one digit.
    pub fn random_balanced(item_count: usize, arity: usize, dim: usize, seed: u64) -> Result<Self> {
        if item_count == 0 {
            return Err(Error::config("tree needs at least one item"));
        }
        if arity < 2 {
            return Err(Error::config(format!("arity must be at least 2, got {arity}")));
        }
        let mut rng = rng_from_seed(seed);
        let mut items: Vec<ItemId> = (0..item_count as ItemId).collect();
        items.shuffle(&mut rng);
        let normal = Normal::new(0.0, INIT_FACTOR_STD).expect("valid std");
        let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
            (0..dim).map(|_| normal.sample(rng)).collect()
        };

        let mut b = TreeBuilder::new(arity, dim);
        if item_count == 1 {
            let leaf = b.add_child(0, &draw(&mut rng), 0.0);
            b.set_item(leaf, items[0]);
            return Ok(b.finish(1));
        }

        let mut height = 1usize;
        let mut capacity = arity;
        while capacity < item_count {
            capacity *= arity;
            height += 1;
        }
        let mut frontier = vec![b.root()];
        for _ in 1..height {
            let mut next = Vec::with_capacity(frontier.len() * arity);
            for &n in &frontier {
                for _ in 0..arity {
                    next.push(b.add_child(n, &draw(&mut rng), 0.0));
                }
            }
            frontier = next;
        }
        // frontier has arity^(height-1) slots; expanding one adds arity-1 leaves.
        let extra = item_count - frontier.len();
        let full = extra / (arity - 1);
        let rem = extra % (arity - 1);
        let mut leaves = Vec::with_capacity(item_count);
        for (pos, &n) in frontier.iter().enumerate() {
            let fanout = if pos < full {
                arity
            } else if pos == full && rem > 0 {
                rem + 1
            } else {
                0
            };
            if fanout == 0 {
                leaves.push(n);
            } else {
                for _ in 0..fanout {
                    leaves.push(b.add_child(n, &draw(&mut rng), 0.0));
                }
            }
        }
        debug_assert_eq!(leaves.len(), item_count);
        for (leaf, item) in leaves.into_iter().zip(items) {
            b.set_item(leaf, item);
        }
        Ok(b.finish(item_count))
    }

    fn rebuild_codes(&mut self) {
        self.item_leaf = vec![None; self.item_count];
        self.codes = vec![None; self.item_count];
        let mut stack = vec![(0usize, Vec::new())];
        while let Some((node, code)) = stack.pop() {
            if let Some(item) = self.nodes[node].item {
                if (item as usize) < self.item_count && self.nodes[node].children.is_empty() {
                    self.item_leaf[item as usize] = Some(node);
                    self.codes[item as usize] = Some(ItemCode(code.clone()));
                }
            }
            for (k, &child) in self.nodes[node].children.iter().enumerate() {
                let mut c = code.clone();
                c.push(k as u32 + 1);
                stack.push((child, c));
            }
        }
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn item_count(&self) -> usize {
        self.item_count
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn root(&self) -> NodeId {
        0
    }

    pub fn children(&self, node: NodeId) -> &[NodeId] {
        &self.nodes[node].children
    }

    pub fn parent(&self, node: NodeId) -> Option<NodeId> {
        self.nodes[node].parent
    }

    pub fn item_at(&self, node: NodeId) -> Option<ItemId> {
        self.nodes[node].item
    }

    pub fn is_leaf(&self, node: NodeId) -> bool {
        self.nodes[node].children.is_empty()
    }

    pub fn factor(&self, node: NodeId) -> &[f64] {
        &self.factors[node * self.dim..(node + 1) * self.dim]
    }

    pub fn factor_mut(&mut self, node: NodeId) -> &mut [f64] {
        &mut self.factors[node * self.dim..(node + 1) * self.dim]
    }

    pub fn bias(&self, node: NodeId) -> f64 {
        self.biases[node]
    }

    pub fn bias_mut(&mut self, node: NodeId) -> &mut f64 {
        &mut self.biases[node]
    }

    /// All node factors, node-major.
    pub fn factors(&self) -> &[f64] {
        &self.factors
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    pub fn params_finite(&self) -> bool {
        self.factors.iter().chain(&self.biases).all(|v| v.is_finite())
    }

    pub fn leaf_of(&self, item: ItemId) -> Result<NodeId> {
        self.item_leaf
            .get(item as usize)
            .copied()
            .flatten()
            .ok_or_else(|| Error::lookup(format!("item {item} not in tree")))
    }

    pub fn code_of(&self, item: ItemId) -> Result<&ItemCode> {
        self.codes
            .get(item as usize)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::lookup(format!("item {item} not in tree")))
    }

    /// Nodes `n_1..n_L` visited below the root on the way to `item`'s leaf.
    pub fn path_of(&self, item: ItemId) -> Result<Vec<NodeId>> {
        let mut node = self.leaf_of(item)?;
        let mut path = vec![node];
        while let Some(p) = self.nodes[node].parent {
            if p == self.root() {
                break;
            }
            path.push(p);
            node = p;
        }
        path.reverse();
        Ok(path)
    }

    /// Per-item code lengths; `None` for items missing from the tree.
    pub fn code_lengths(&self) -> impl Iterator<Item = usize> + '_ {
        self.codes.iter().flatten().map(ItemCode::len)
    }

    fn child_scores(&self, node: NodeId, user: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.nodes[node]
                .children
                .iter()
                .map(|&c| dot(user, self.factor(c)) + self.bias(c)),
        );
    }

    fn check_internal(&self, node: NodeId) -> Result<()> {
        if node >= self.nodes.len() {
            return Err(Error::lookup(format!("node {node} not in tree")));
        }
        if self.is_leaf(node) {
            return Err(Error::contract(format!("node {node} is a leaf")));
        }
        Ok(())
    }

    /// Distribution over the children of an internal node.
    pub fn child_probs(&self, node: NodeId, user: &[f64]) -> Result<Vec<f64>> {
        self.check_internal(node)?;
        let mut scores = Vec::new();
        self.child_scores(node, user, &mut scores);
        crate::linalg::softmax_in_place(&mut scores);
        Ok(scores)
    }

    /// Probability of choosing the `k`-th child (1-based).
    pub fn child_prob(&self, node: NodeId, user: &[f64], k: usize) -> Result<f64> {
        self.check_internal(node)?;
        let n = self.nodes[node].children.len();
        if k == 0 || k > n {
            return Err(Error::contract(format!("child {k} out of range 1..={n}")));
        }
        Ok(self.child_probs(node, user)?[k - 1])
    }

    /// `ln P(item | user)`, summed along the path.
    pub fn item_log_prob(&self, user: &[f64], item: ItemId) -> Result<f64> {
        let leaf = self.leaf_of(item)?;
        let mut scores = Vec::with_capacity(self.arity);
        let mut total = 0.0;
        let mut node = leaf;
        while let Some(parent) = self.nodes[node].parent {
            self.child_scores(parent, user, &mut scores);
            let k = self.nodes[parent]
                .children
                .iter()
                .position(|&c| c == node)
                .expect("child listed under its parent");
            total += scores[k] - log_sum_exp(&scores);
            node = parent;
        }
        Ok(total)
    }

    pub fn item_prob(&self, user: &[f64], item: ItemId) -> Result<f64> {
        Ok(self.item_log_prob(user, item)?.exp())
    }

    /// `ln P(i | user)` for every item, one softmax per internal node.
    pub fn full_log_distribution(&self, user: &[f64]) -> Vec<f64> {
        let mut out = vec![f64::NEG_INFINITY; self.item_count];
        let mut scores = Vec::with_capacity(self.arity);
        let mut stack = vec![(self.root(), 0.0f64)];
        while let Some((node, logp)) = stack.pop() {
            if let Some(item) = self.nodes[node].item {
                if self.is_leaf(node) && (item as usize) < self.item_count {
                    out[item as usize] = logp;
                }
                continue;
            }
            if self.is_leaf(node) {
                continue;
            }
            self.child_scores(node, user, &mut scores);
            let lse = log_sum_exp(&scores);
            for (&c, s) in self.nodes[node].children.iter().zip(&scores) {
                stack.push((c, logp + s - lse));
            }
        }
        out
    }

    pub fn full_distribution(&self, user: &[f64]) -> Vec<f64> {
        self.full_log_distribution(user).into_iter().map(f64::exp).collect()
    }
}

/// A broken tree invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    ArityOutOfRange { node: NodeId, children: usize },
    LeafWithoutItem { node: NodeId },
    InternalWithItem { node: NodeId },
    ItemOutOfRange { node: NodeId, item: ItemId },
    DuplicateItem { item: ItemId, leaves: Vec<NodeId> },
    MissingItem { item: ItemId },
    CodeMismatch { item: ItemId },
    BrokenParentLink { node: NodeId },
    ParameterShape,
    NonFiniteParameter { node: NodeId },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::ArityOutOfRange { node, children } => {
                write!(f, "node {node} has {children} children")
            }
            Violation::LeafWithoutItem { node } => write!(f, "leaf {node} holds no item"),
            Violation::InternalWithItem { node } => write!(f, "internal node {node} holds an item"),
            Violation::ItemOutOfRange { node, item } => {
                write!(f, "leaf {node} holds out-of-range item {item}")
            }
            Violation::DuplicateItem { item, leaves } => {
                write!(f, "item {item} appears at leaves {leaves:?}")
            }
            Violation::MissingItem { item } => write!(f, "item {item} has no leaf"),
            Violation::CodeMismatch { item } => {
                write!(f, "stored code of item {item} does not reach its leaf")
            }
            Violation::BrokenParentLink { node } => write!(f, "node {node} has inconsistent parent links"),
            Violation::ParameterShape => write!(f, "parameter blocks do not match node count and dimension"),
            Violation::NonFiniteParameter { node } => write!(f, "node {node} has non-finite parameters"),
        }
    }
}

/// Reports every broken invariant; an empty list means the tree is valid.
pub fn validate(tree: &ItemTree) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = tree.nodes.len();
    if tree.factors.len() != n * tree.dim || tree.biases.len() != n {
        out.push(Violation::ParameterShape);
        return out;
    }
    let mut leaves_of: Vec<Vec<NodeId>> = vec![Vec::new(); tree.item_count];
    for (id, node) in tree.nodes.iter().enumerate() {
        let parent_ok = match node.parent {
            None => id == 0,
            Some(p) => id != 0 && p < n && tree.nodes[p].children.contains(&id),
        };
        let children_ok = node
            .children
            .iter()
            .all(|&c| c < n && tree.nodes[c].parent == Some(id));
        if !parent_ok || !children_ok {
            out.push(Violation::BrokenParentLink { node: id });
        }
        let k = node.children.len();
        if k == 0 {
            match node.item {
                None => out.push(Violation::LeafWithoutItem { node: id }),
                Some(item) if item as usize >= tree.item_count => {
                    out.push(Violation::ItemOutOfRange { node: id, item })
                }
                Some(item) => leaves_of[item as usize].push(id),
            }
        } else {
            if node.item.is_some() {
                out.push(Violation::InternalWithItem { node: id });
            }
            let single_item_root = id == 0 && k == 1 && tree.item_count == 1;
            if !single_item_root && (k < 2 || k > tree.arity) {
                out.push(Violation::ArityOutOfRange { node: id, children: k });
            }
        }
        let params_ok = tree.factor(id).iter().all(|v| v.is_finite()) && tree.bias(id).is_finite();
        if !params_ok {
            out.push(Violation::NonFiniteParameter { node: id });
        }
    }
    if tree.nodes[0].children.is_empty() {
        // a lone root would give an empty code
        out.push(Violation::ArityOutOfRange { node: 0, children: 0 });
    }
    for (item, leaves) in leaves_of.iter().enumerate() {
        let item = item as ItemId;
        match leaves.len() {
            0 => out.push(Violation::MissingItem { item }),
            1 => {
                if !code_reaches(tree, item, leaves[0]) {
                    out.push(Violation::CodeMismatch { item });
                }
            }
            _ => out.push(Violation::DuplicateItem { item, leaves: leaves.clone() }),
        }
    }
    out
}

fn code_reaches(tree: &ItemTree, item: ItemId, leaf: NodeId) -> bool {
    let Some(code) = tree.codes[item as usize].as_ref() else {
        return false;
    };
    if code.is_empty() || tree.item_leaf[item as usize] != Some(leaf) {
        return false;
    }
    let mut node = tree.root();
    for &d in code.digits() {
        match tree.nodes[node].children.get((d as usize).wrapping_sub(1)) {
            Some(&c) => node = c,
            None => return false,
        }
    }
    node == leaf
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use rand::Rng;

    fn random_user(dim: usize, seed: u64) -> Vec<f64> {
        Matrix::gaussian(1, dim, 1.0, &mut rng_from_seed(seed)).row(0).to_vec()
    }

    fn randomize_params(tree: &mut ItemTree, seed: u64) {
        let mut rng = rng_from_seed(seed);
        for v in tree.factors.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        for v in tree.biases.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }

    fn zero_params(tree: &mut ItemTree) {
        tree.factors.iter_mut().for_each(|v| *v = 0.0);
        tree.biases.iter_mut().for_each(|v| *v = 0.0);
    }

    #[test]
    fn four_items_binary_has_length_two_codes() {
        let t = ItemTree::random_balanced(4, 2, 3, 1).unwrap();
        assert!(t.code_lengths().all(|l| l == 2));
        assert!(validate(&t).is_empty());
    }

    #[test]
    fn single_item_tree() {
        let t = ItemTree::random_balanced(1, 2, 3, 1).unwrap();
        assert_eq!(t.code_of(0).unwrap().digits(), &[1]);
        assert!(validate(&t).is_empty());
        assert!((t.item_prob(&[0.3, 0.1, 2.0], 0).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn movielens_sized_tree_depths() {
        let t = ItemTree::random_balanced(10677, 2, 1, 3).unwrap();
        let lens: Vec<usize> = t.code_lengths().collect();
        assert_eq!(lens.len(), 10677);
        assert_eq!(*lens.iter().max().unwrap(), 14);
        assert_eq!(*lens.iter().min().unwrap(), 13);
        assert!(validate(&t).is_empty());
    }

    #[test]
    fn balanced_trees_are_valid_for_many_shapes() {
        for k in 2..=5 {
            for n in 1..=70 {
                let t = ItemTree::random_balanced(n, k, 2, n as u64).unwrap();
                assert!(validate(&t).is_empty(), "n={n} k={k}: {:?}", validate(&t));
                let lens: Vec<usize> = t.code_lengths().collect();
                let (lo, hi) = (lens.iter().min().unwrap(), lens.iter().max().unwrap());
                assert!(hi - lo <= 1, "n={n} k={k}");
                let mut height = 1;
                while k.pow(height as u32) < n {
                    height += 1;
                }
                assert_eq!(*hi, height, "n={n} k={k}");
            }
        }
    }

    #[test]
    fn worked_code_example() {
        // root with four children; the fourth has two leaf children
        let mut b = TreeBuilder::new(4, 1);
        let mut kids = Vec::new();
        for item in 0..3 {
            let c = b.add_child(0, &[0.0], 0.0);
            b.set_item(c, item);
            kids.push(c);
        }
        let fourth = b.add_child(0, &[0.0], 0.0);
        let a = b.add_child(fourth, &[0.0], 0.0);
        b.set_item(a, 3);
        let z = b.add_child(fourth, &[0.0], 0.0);
        b.set_item(z, 4);
        let t = b.finish(5);
        assert!(validate(&t).is_empty());
        assert_eq!(t.code_of(3).unwrap().digits(), &[4, 1]);
        assert_eq!(t.path_of(3).unwrap(), vec![fourth, a]);
    }

    #[test]
    fn path_and_code_agree_on_every_item() {
        let t = ItemTree::random_balanced(1000, 3, 2, 11).unwrap();
        for item in 0..1000 {
            let code = t.code_of(item).unwrap();
            let path = t.path_of(item).unwrap();
            assert_eq!(code.len(), path.len());
            let mut prev = t.root();
            for (&d, &n) in code.digits().iter().zip(&path) {
                assert_eq!(t.children(prev)[d as usize - 1], n);
                prev = n;
            }
            assert_eq!(t.item_at(prev), Some(item));
        }
        assert!(matches!(t.code_of(1000), Err(Error::Lookup(_))));
        assert!(t.path_of(5000).is_err());
    }

    #[test]
    fn child_prob_cases() {
        let mut t = ItemTree::random_balanced(2, 2, 2, 0).unwrap();
        zero_params(&mut t);
        assert_eq!(t.child_prob(0, &[0.4, 0.2], 1).unwrap(), 0.5);
        let c = t.children(0).to_vec();
        t.factor_mut(c[0]).copy_from_slice(&[1.0, 0.0]);
        let p = t.child_prob(0, &[1.0, 0.0], 1).unwrap();
        let e = std::f64::consts::E;
        assert!((p - e / (e + 1.0)).abs() < 1e-15);
        assert!((p - 0.73106).abs() < 1e-5);
        // shifting sibling biases leaves probabilities unchanged
        *t.bias_mut(c[0]) += 3.7;
        *t.bias_mut(c[1]) += 3.7;
        assert!((t.child_prob(0, &[1.0, 0.0], 1).unwrap() - p).abs() < 1e-15);
        assert!(matches!(t.child_prob(c[0], &[1.0, 0.0], 1), Err(Error::Contract(_))));
        assert!(matches!(t.child_prob(0, &[1.0, 0.0], 3), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_params_give_uniform_items() {
        let mut t = ItemTree::random_balanced(4, 2, 3, 5).unwrap();
        zero_params(&mut t);
        for item in 0..4 {
            assert!((t.item_prob(&[0.5, -1.0, 2.0], item).unwrap() - 0.25).abs() < 1e-15);
        }
        let d = t.full_distribution(&[1.0, 2.0, 3.0]);
        assert!(d.iter().all(|p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn sixteen_items_sum_to_one() {
        let mut t = ItemTree::random_balanced(16, 2, 4, 9).unwrap();
        randomize_params(&mut t, 10);
        let u = random_user(4, 12);
        let total: f64 = (0..16).map(|i| t.item_prob(&u, i).unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn full_distribution_matches_per_item() {
        let mut t = ItemTree::random_balanced(100, 3, 5, 2).unwrap();
        randomize_params(&mut t, 3);
        let u = random_user(5, 4);
        let full = t.full_distribution(&u);
        for item in 0..100 {
            assert!((full[item as usize] - t.item_prob(&u, item).unwrap()).abs() < 1e-12);
        }
        assert!((full.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn deep_paths_do_not_underflow() {
        let mut t = ItemTree::random_balanced(4096, 2, 2, 2).unwrap();
        zero_params(&mut t);
        for n in 1..t.node_count() {
            *t.bias_mut(n) = if t.children(t.parent(n).unwrap())[0] == n { 0.0 } else { -60.0 };
        }
        let lp = t.item_log_prob(&[0.0, 0.0], t.item_at(t.leaf_of(0).unwrap()).unwrap()).unwrap();
        assert!(lp.is_finite());
    }

    #[test]
    fn duplicate_item_is_reported() {
        let mut t = ItemTree::random_balanced(4, 2, 1, 1).unwrap();
        let leaf0 = t.leaf_of(0).unwrap();
        let leaf1 = t.leaf_of(1).unwrap();
        t.nodes[leaf1].item = Some(0);
        let v = validate(&t);
        assert!(v.iter().any(|x| matches!(x, Violation::DuplicateItem { item: 0, leaves } if leaves.contains(&leaf0))));
        assert!(v.contains(&Violation::MissingItem { item: 1 }));
    }

    #[test]
    fn mutated_code_is_reported() {
        let mut t = ItemTree::random_balanced(8, 2, 1, 1).unwrap();
        assert!(validate(&t).is_empty());
        let code = t.codes[5].as_mut().unwrap();
        code.0[1] = 3 - code.0[1];
        assert_eq!(validate(&t), vec![Violation::CodeMismatch { item: 5 }]);
    }

    #[test]
    fn unary_internal_node_is_reported() {
        let mut b = TreeBuilder::new(2, 1);
        let mid = b.add_child(0, &[0.0], 0.0);
        let a = b.add_child(mid, &[0.0], 0.0);
        b.set_item(a, 0);
        let z = b.add_child(0, &[0.0], 0.0);
        b.set_item(z, 1);
        let t = b.finish(2);
        assert_eq!(validate(&t), vec![Violation::ArityOutOfRange { node: mid, children: 1 }]);
    }
}
