//! Model-based top-down item tree learning.
//!
//! The tree is grown one level at a time with user factors held fixed. At
//! each frontier node the learner alternates between fitting the children's
//! multinomial logistic regression and reassigning every item to the child
//! that maximizes
//!
//! ```text
//! R_i·Q_c + |U_i|·b_c + F̃
//! ```
//!
//! where `R_i` sums the factors of the item's training users and `F̃` scores
//! the resulting child counts `Z_c` under a user-independent count model of
//! the levels still to be learned. `F̃ = -Σ_c Z_c ln Z_c` penalizes piling
//! items into one child.

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::ImplicitDataset;
use crate::itemtree::{ItemTree, TreeBuilder, INIT_FACTOR_STD};
use crate::linalg::{axpy, derive_seed, dot, rng_from_seed, softmax_in_place, xlogx, Matrix};
use crate::params::{decode_f64s, encode_f64s};
use crate::{Error, ItemId, Result};

/// Per-item sums of training-user factors.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateReps {
    reps: Matrix,
    selections: Vec<u64>,
    occurrences: Vec<u64>,
}

impl SurrogateReps {
    pub fn n_items(&self) -> usize {
        self.reps.rows()
    }

    pub fn dim(&self) -> usize {
        self.reps.cols()
    }

    /// `R_i`.
    pub fn rep(&self, item: ItemId) -> &[f64] {
        self.reps.row(item as usize)
    }

    /// `|U_i|`.
    pub fn selections(&self, item: ItemId) -> u64 {
        self.selections[item as usize]
    }

    /// `N_i`, the item's number of training pairs.
    pub fn occurrences(&self, item: ItemId) -> u64 {
        self.occurrences[item as usize]
    }

    /// `R_i / |U_i|`, zero for unselected items.
    pub fn mean_rep(&self, item: ItemId) -> Vec<f64> {
        let n = self.selections(item).max(1) as f64;
        self.rep(item).iter().map(|v| v / n).collect()
    }
}

/// Exact surrogates for every item; an item without training users is a
/// data error.
pub fn surrogate_reps(train: &ImplicitDataset, users: &Matrix) -> Result<SurrogateReps> {
    let reps = surrogate_reps_lenient(train, users)?;
    if let Some(i) = reps.selections.iter().position(|&s| s == 0) {
        return Err(Error::data(format!("item {i} has no training users")));
    }
    Ok(reps)
}

fn surrogate_reps_lenient(train: &ImplicitDataset, users: &Matrix) -> Result<SurrogateReps> {
    if users.rows() < train.n_users() {
        return Err(Error::config(format!(
            "{} user vectors for {} training users",
            users.rows(),
            train.n_users()
        )));
    }
    let mut reps = Matrix::zeros(train.n_items(), users.cols());
    let mut selections = Vec::with_capacity(train.n_items());
    for item in 0..train.n_items() as ItemId {
        let who = train.item_users(item);
        let row = reps.row_mut(item as usize);
        for &u in who {
            axpy(1.0, users.row(u as usize), row);
        }
        selections.push(who.len() as u64);
    }
    Ok(SurrogateReps { reps, selections, occurrences: train.item_counts().to_vec() })
}

/// Which sign the future-levels term carries. Only `Derived` prevents
/// degenerate splits; `Printed` rewards them and exists for comparison.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FutureSign {
    #[default]
    Derived,
    Printed,
}

impl FutureSign {
    fn factor(self) -> f64 {
        match self {
            FutureSign::Derived => -1.0,
            FutureSign::Printed => 1.0,
        }
    }
}

/// `-Σ_c Z_c ln Z_c` with `0 ln 0 = 0`.
pub fn ftilde(counts: &[f64]) -> Result<f64> {
    if let Some(z) = counts.iter().find(|z| !(**z >= 0.0)) {
        return Err(Error::contract(format!("child count {z} is negative")));
    }
    Ok(-counts.iter().map(|&z| xlogx(z)).sum::<f64>())
}

/// Working state of one frontier node while its digit is learned.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeState {
    node: usize,
    items: Vec<ItemId>,
    slots: Vec<usize>,
    factors: Matrix,
    biases: Vec<f64>,
    counts: Vec<f64>,
    ftilde: f64,
    sign: FutureSign,
}

impl NodeState {
    /// `slots[p]` is the 0-based child of `items[p]`; `factors` has one row
    /// per child slot. `node` only labels messages.
    pub fn new(
        node: usize,
        items: Vec<ItemId>,
        slots: Vec<usize>,
        factors: Matrix,
        biases: Vec<f64>,
        reps: &SurrogateReps,
        sign: FutureSign,
    ) -> Result<Self> {
        let arity = factors.rows();
        if arity < 2 || biases.len() != arity || factors.cols() != reps.dim() {
            return Err(Error::config("node parameters need one factor row and bias per child, K >= 2"));
        }
        if slots.len() != items.len() || slots.iter().any(|&s| s >= arity) {
            return Err(Error::contract("every item needs a child slot below K"));
        }
        if items.iter().any(|&i| i as usize >= reps.n_items()) {
            return Err(Error::contract("node item outside surrogate table"));
        }
        let mut counts = vec![0.0; arity];
        for (&i, &s) in items.iter().zip(&slots) {
            counts[s] += reps.occurrences(i) as f64;
        }
        let mut state = NodeState { node, items, slots, factors, biases, counts, ftilde: 0.0, sign };
        state.ftilde = state.recomputed_ftilde();
        Ok(state)
    }

    pub fn node(&self) -> usize {
        self.node
    }

    pub fn arity(&self) -> usize {
        self.biases.len()
    }

    pub fn items(&self) -> &[ItemId] {
        &self.items
    }

    /// 0-based child slots, parallel to [`items`](Self::items).
    pub fn slots(&self) -> &[usize] {
        &self.slots
    }

    /// 1-based digit of `item`, if it belongs to this node.
    pub fn digit_of(&self, item: ItemId) -> Option<u32> {
        self.position(item).map(|p| self.slots[p] as u32 + 1)
    }

    /// Moves `item` to the 1-based child `digit`, keeping `Z_c` and the
    /// cached future term current.
    pub fn set_digit(&mut self, item: ItemId, digit: u32, reps: &SurrogateReps) -> Result<()> {
        let p = self
            .position(item)
            .ok_or_else(|| Error::contract(format!("item {item} is not under node {}", self.node)))?;
        if digit == 0 || digit as usize > self.arity() {
            return Err(Error::contract(format!("digit {digit} outside 1..={}", self.arity())));
        }
        let weight = reps.occurrences(item) as f64;
        self.shift_count(self.slots[p], -weight);
        self.slots[p] = digit as usize - 1;
        self.shift_count(self.slots[p], weight);
        Ok(())
    }

    /// `Z_c` per child slot.
    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    pub fn cached_ftilde(&self) -> f64 {
        self.ftilde
    }

    pub fn recomputed_ftilde(&self) -> f64 {
        self.sign.factor() * self.counts.iter().map(|&z| xlogx(z)).sum::<f64>()
    }

    pub fn factors(&self) -> &Matrix {
        &self.factors
    }

    pub fn factors_mut(&mut self) -> &mut Matrix {
        &mut self.factors
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    pub fn biases_mut(&mut self) -> &mut [f64] {
        &mut self.biases
    }

    pub fn child_items(&self, slot: usize) -> Vec<ItemId> {
        self.items.iter().zip(&self.slots).filter(|(_, &s)| s == slot).map(|(&i, _)| i).collect()
    }

    pub fn occupied_slots(&self) -> Vec<usize> {
        let mut occupied = vec![false; self.arity()];
        self.slots.iter().for_each(|&s| occupied[s] = true);
        (0..self.arity()).filter(|&s| occupied[s]).collect()
    }

    fn position(&self, item: ItemId) -> Option<usize> {
        self.items.iter().position(|&i| i == item)
    }

    fn shift_count(&mut self, slot: usize, delta: f64) {
        let s = self.sign.factor();
        self.ftilde -= s * xlogx(self.counts[slot]);
        self.counts[slot] += delta;
        self.ftilde += s * xlogx(self.counts[slot]);
    }

    /// Moves the item at position `p` to its best child and returns whether
    /// its slot changed.
    fn update_position(&mut self, p: usize, reps: &SurrogateReps) -> bool {
        let item = self.items[p];
        let weight = reps.occurrences(item) as f64;
        let selections = reps.selections(item) as f64;
        let old = self.slots[p];
        self.shift_count(old, -weight);
        let s = self.sign.factor();
        let mut best = (0usize, f64::NEG_INFINITY);
        for d in 0..self.arity() {
            let z = self.counts[d];
            let future = self.ftilde - s * xlogx(z) + s * xlogx(z + weight);
            let value = dot(reps.rep(item), self.factors.row(d)) + selections * self.biases[d] + future;
            if value > best.1 {
                best = (d, value);
            }
        }
        self.slots[p] = best.0;
        self.shift_count(best.0, weight);
        best.0 != old
    }

    /// One pass of digit updates over the node's items; returns how many
    /// changed.
    pub fn sweep(&mut self, reps: &SurrogateReps) -> usize {
        (0..self.items.len()).filter(|&p| self.update_position(p, reps)).count()
    }

    /// Log-likelihood of the current digits under the children's softmax,
    /// plus the cached future term.
    pub fn proxy_objective(&self, train: &ImplicitDataset, users: &Matrix) -> f64 {
        self.ftilde + self.softmax_loglik(train, users, false)
    }

    /// `Σ_i Σ_{u ∈ U_i} ln P(digit_i | u)` over the users of `data`, with
    /// empty children excluded as they are once the level is built.
    pub fn digit_loglik(&self, data: &ImplicitDataset, users: &Matrix) -> f64 {
        self.softmax_loglik(data, users, true)
    }

    fn softmax_loglik(&self, data: &ImplicitDataset, users: &Matrix, drop_empty: bool) -> f64 {
        let occupied = if drop_empty { self.occupied_slots() } else { (0..self.arity()).collect() };
        let mut scores = vec![0.0; self.arity()];
        let mut total = 0.0;
        for (&item, &slot) in self.items.iter().zip(&self.slots) {
            for &u in data.item_users(item) {
                child_scores(&self.factors, &self.biases, users.row(u as usize), &mut scores);
                for (c, v) in scores.iter_mut().enumerate() {
                    if !occupied.contains(&c) {
                        *v = f64::NEG_INFINITY;
                    }
                }
                let target = scores[slot];
                total += target - crate::linalg::log_sum_exp(&scores);
            }
        }
        total
    }
}

fn child_scores(factors: &Matrix, biases: &[f64], user: &[f64], out: &mut [f64]) {
    for (c, o) in out.iter_mut().enumerate() {
        *o = dot(user, factors.row(c)) + biases[c];
    }
}

/// Reassigns `item` to the child maximizing the digit-update objective
/// (ties go to the smallest digit) and returns its new 1-based digit.
pub fn digit_update(state: &mut NodeState, reps: &SurrogateReps, item: ItemId) -> Result<u32> {
    let p = state
        .position(item)
        .ok_or_else(|| Error::contract(format!("item {item} is not under node {}", state.node)))?;
    state.update_position(p, reps);
    Ok(state.slots[p] as u32 + 1)
}

/// `ln P(label | user)` for a K-way softmax over `U·Q_c + b_c`, with its
/// gradient written into `grad_factors` (K × D) and `grad_biases`.
pub fn mlr_log_prob_gradient(
    factors: &Matrix,
    biases: &[f64],
    user: &[f64],
    label: usize,
    grad_factors: &mut [f64],
    grad_biases: &mut [f64],
) -> f64 {
    let d = factors.cols();
    let mut probs = vec![0.0; biases.len()];
    child_scores(factors, biases, user, &mut probs);
    let target = probs[label];
    let log_norm = softmax_in_place(&mut probs);
    for (c, &p) in probs.iter().enumerate() {
        let coef = if c == label { 1.0 } else { 0.0 } - p;
        grad_biases[c] = coef;
        for (g, x) in grad_factors[c * d..(c + 1) * d].iter_mut().zip(user) {
            *g = coef * x;
        }
    }
    target - log_norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NodeFitConfig {
    pub passes: usize,
    pub learning_rate: f64,
    pub decay: f64,
    pub l2: f64,
}

impl Default for NodeFitConfig {
    fn default() -> Self {
        NodeFitConfig { passes: 3, learning_rate: 0.05, decay: 0.9, l2: 1e-4 }
    }
}

/// SGD on the children's logistic regression with the current digits as
/// labels and the fixed user vectors as inputs.
pub fn update_node_params(
    state: &mut NodeState,
    train: &ImplicitDataset,
    users: &Matrix,
    config: &NodeFitConfig,
    seed: u64,
) -> Result<()> {
    let mut obs: Vec<(u32, usize)> = Vec::new();
    for (&item, &slot) in state.items.iter().zip(&state.slots) {
        obs.extend(train.item_users(item).iter().map(|&u| (u, slot)));
    }
    let (k, d) = (state.arity(), state.factors.cols());
    let mut gf = vec![0.0; k * d];
    let mut gb = vec![0.0; k];
    let mut rng = rng_from_seed(seed);
    for pass in 0..config.passes {
        obs.shuffle(&mut rng);
        let lr = config.learning_rate * config.decay.powi(pass as i32);
        for &(u, label) in &obs {
            mlr_log_prob_gradient(&state.factors, &state.biases, users.row(u as usize), label, &mut gf, &mut gb);
            for (q, g) in state.factors.as_mut_slice().iter_mut().zip(&gf) {
                *q += lr * (g - config.l2 * *q);
            }
            for (b, g) in state.biases.iter_mut().zip(&gb) {
                *b += lr * (g - config.l2 * *b);
            }
        }
        if !state.factors.is_finite() || state.biases.iter().any(|b| !b.is_finite()) {
            return Err(Error::divergence(
                "tree learning",
                format!("node {} parameters became non-finite in pass {pass}", state.node),
            ));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LevelConfig {
    /// Parameter-fit / digit-sweep alternations.
    pub rounds: usize,
    /// A sweep moving fewer than this fraction of items ends the level.
    pub min_change_fraction: f64,
    pub fit: NodeFitConfig,
}

impl Default for LevelConfig {
    fn default() -> Self {
        LevelConfig { rounds: 5, min_change_fraction: 1e-3, fit: NodeFitConfig::default() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LevelOutcome {
    pub sweeps: usize,
    /// Total digit changes over all sweeps.
    pub digits_changed: usize,
    /// Proxy objective after each sweep.
    pub proxy_trace: Vec<f64>,
}

/// Learns the digit of every item at one node.
///
/// Each round fits the node parameters and then sweeps the digits. A
/// starting assignment with all items in one child is swept before the
/// first fit, since fitting to it would entrench the degenerate split. A
/// final fit aligns the parameters with the last digits. `rounds == 0`
/// leaves the state untouched.
pub fn learn_level(
    state: &mut NodeState,
    train: &ImplicitDataset,
    users: &Matrix,
    reps: &SurrogateReps,
    config: &LevelConfig,
    seed: u64,
) -> Result<LevelOutcome> {
    let mut outcome = LevelOutcome::default();
    if config.rounds == 0 {
        return Ok(outcome);
    }
    let degenerate = state.occupied_slots().len() < 2;
    for round in 0..config.rounds {
        if (round == 0 && !degenerate) || (round == 1 && degenerate) {
            warm_start_biases(state, reps);
        }
        if round > 0 || !degenerate {
            update_node_params(state, train, users, &config.fit, derive_seed(seed, round as u64))?;
        }
        let changed = state.sweep(reps);
        outcome.sweeps += 1;
        outcome.digits_changed += changed;
        outcome.proxy_trace.push(state.proxy_objective(train, users));
        if (changed as f64) < config.min_change_fraction * state.items.len() as f64 {
            break;
        }
    }
    update_node_params(state, train, users, &config.fit, derive_seed(seed, u64::MAX))?;
    Ok(outcome)
}

/// Sets the child biases to the centred log of the add-one smoothed child
/// masses `Σ_{k ∈ I(c)} (N_k + 1)`, the user-independent count model.
fn warm_start_biases(state: &mut NodeState, reps: &SurrogateReps) {
    let mut mass = vec![0.0; state.arity()];
    for (&i, &s) in state.items.iter().zip(&state.slots) {
        mass[s] += reps.occurrences(i) as f64 + 1.0;
    }
    let logs: Vec<f64> = mass.iter().map(|&m| if m > 0.0 { m.ln() } else { -30.0 }).collect();
    let mean = logs.iter().sum::<f64>() / logs.len() as f64;
    state.biases = logs.into_iter().map(|l| l - mean).collect();
}

/// Uniformly random 0-based child slots for `n` items.
pub fn init_assign_random(n: usize, arity: usize, seed: u64) -> Vec<usize> {
    let mut rng = rng_from_seed(seed);
    (0..n).map(|_| rng.random_range(0..arity)).collect()
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// K-means with k-means++ seeding over the items' surrogates (the mean user
/// vector unless `raw`), at most 50 Lloyd iterations. Returns 0-based slots;
/// with at most K items each gets its own slot.
pub fn init_assign_cluster(items: &[ItemId], reps: &SurrogateReps, arity: usize, seed: u64, raw: bool) -> Vec<usize> {
    if items.len() <= arity {
        return (0..items.len()).collect();
    }
    let points: Vec<Vec<f64>> =
        items.iter().map(|&i| if raw { reps.rep(i).to_vec() } else { reps.mean_rep(i) }).collect();
    let mut rng = rng_from_seed(seed);
    let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
    let mut nearest: Vec<f64> = points.iter().map(|p| squared_distance(p, &centers[0])).collect();
    while centers.len() < arity {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = points.len() - 1;
            for (p, &w) in nearest.iter().enumerate() {
                if target < w {
                    pick = p;
                    break;
                }
                target -= w;
            }
            points[pick].clone()
        } else {
            centers[0].clone()
        };
        for (p, n) in points.iter().zip(nearest.iter_mut()) {
            *n = n.min(squared_distance(p, &next));
        }
        centers.push(next);
    }
    let mut labels = vec![usize::MAX; points.len()];
    for _ in 0..50 {
        let mut moved = false;
        for (p, label) in points.iter().zip(labels.iter_mut()) {
            let mut best = (0, f64::INFINITY);
            for (c, center) in centers.iter().enumerate() {
                let dist = squared_distance(p, center);
                if dist < best.1 {
                    best = (c, dist);
                }
            }
            if *label != best.0 {
                *label = best.0;
                moved = true;
            }
        }
        if !moved {
            break;
        }
        let dim = reps.dim();
        let mut sums = vec![vec![0.0; dim]; arity];
        let mut sizes = vec![0usize; arity];
        for (p, &l) in points.iter().zip(&labels) {
            axpy(1.0, p, &mut sums[l]);
            sizes[l] += 1;
        }
        for c in 0..arity {
            if sizes[c] > 0 {
                centers[c] = sums[c].iter().map(|v| v / sizes[c] as f64).collect();
            }
        }
    }
    labels
}

/// Splits the node's items into K nearly equal groups along the principal
/// direction of their mean surrogates.
fn median_split(state: &mut NodeState, reps: &SurrogateReps) {
    let dim = reps.dim();
    let points: Vec<Vec<f64>> = state.items.iter().map(|&i| reps.mean_rep(i)).collect();
    let mut mean = vec![0.0; dim];
    points.iter().for_each(|p| axpy(1.0 / points.len() as f64, p, &mut mean));
    let centred: Vec<Vec<f64>> =
        points.iter().map(|p| p.iter().zip(&mean).map(|(a, b)| a - b).collect()).collect();
    let mut dir = vec![1.0; dim];
    for _ in 0..30 {
        let mut next = vec![0.0; dim];
        for x in &centred {
            axpy(dot(x, &dir), x, &mut next);
        }
        let norm = dot(&next, &next).sqrt();
        if norm == 0.0 {
            break;
        }
        dir = next.into_iter().map(|v| v / norm).collect();
    }
    let mut order: Vec<usize> = (0..state.items.len()).collect();
    let key: Vec<f64> = centred.iter().map(|x| dot(x, &dir)).collect();
    order.sort_by(|&a, &b| key[a].total_cmp(&key[b]).then(state.items[a].cmp(&state.items[b])));
    let groups = state.arity().min(order.len());
    for (rank, &p) in order.iter().enumerate() {
        state.slots[p] = rank * groups / order.len();
    }
    let mut counts = vec![0.0; state.arity()];
    for (&i, &s) in state.items.iter().zip(&state.slots) {
        counts[s] += reps.occurrences(i) as f64;
    }
    state.counts = counts;
    state.ftilde = state.recomputed_ftilde();
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Random,
    #[default]
    Cluster,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeLearnConfig {
    pub arity: usize,
    pub init: InitMode,
    /// Cluster on raw `R_i` instead of `R_i / |U_i|`.
    pub cluster_raw: bool,
    pub level: LevelConfig,
    pub sign: FutureSign,
    pub seed: u64,
    /// Worker threads for frontier nodes; results do not depend on it.
    pub threads: usize,
}

impl Default for TreeLearnConfig {
    fn default() -> Self {
        TreeLearnConfig {
            arity: 2,
            init: InitMode::Cluster,
            cluster_raw: false,
            level: LevelConfig::default(),
            sign: FutureSign::Derived,
            seed: 0,
            threads: 1,
        }
    }
}

/// One working level: every frontier node's state.
#[derive(Debug, Clone)]
pub struct LevelState {
    pub level: usize,
    pub nodes: Vec<NodeState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelProgress {
    pub level: usize,
    pub nodes: usize,
    pub digits_changed: usize,
    pub proxy_objective: f64,
    pub forced_splits: usize,
    /// Nodes whose fitted parameters lost to the count model.
    pub reverted_nodes: usize,
    pub valid_loglik: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PartialNode {
    parent: Option<usize>,
    item: Option<ItemId>,
    /// Factor then bias, base64 little-endian.
    params: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FrontierNode {
    node: usize,
    items: Vec<ItemId>,
}

/// Resumable learner state after a whole number of levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeCheckpoint {
    arity: usize,
    dim: usize,
    item_count: usize,
    levels_done: usize,
    nodes: Vec<PartialNode>,
    frontier: Vec<FrontierNode>,
    pub progress: Vec<LevelProgress>,
}

impl TreeCheckpoint {
    pub fn levels_done(&self) -> usize {
        self.levels_done
    }

    pub fn is_done(&self) -> bool {
        self.frontier.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec(self).expect("checkpoint serializes");
        out.push(b'\n');
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        serde_json::from_slice(bytes)
            .map_err(|e| Error::Format { offset: 0, message: format!("tree checkpoint: {e}") })
    }

    fn params(&self, node: usize) -> (Vec<f64>, f64) {
        let mut p = decode_f64s(&self.nodes[node].params).expect("checkpoint params");
        let bias = p.pop().expect("bias present");
        (p, bias)
    }

    fn push_node(&mut self, parent: usize, factor: &[f64], bias: f64, item: Option<ItemId>) -> usize {
        let mut p = factor.to_vec();
        p.push(bias);
        self.nodes.push(PartialNode { parent: Some(parent), item, params: encode_f64s(&p) });
        self.nodes.len() - 1
    }
}

#[derive(Debug, Clone)]
pub struct LearnedTree {
    pub tree: ItemTree,
    pub progress: Vec<LevelProgress>,
}

/// Level-by-level tree learner over fixed user factors.
pub struct TreeLearner<'a> {
    train: &'a ImplicitDataset,
    users: &'a Matrix,
    valid: Option<&'a ImplicitDataset>,
    config: TreeLearnConfig,
    reps: SurrogateReps,
}

struct NodeResult {
    state: NodeState,
    outcome: LevelOutcome,
    forced: bool,
    reverted: bool,
}

impl<'a> TreeLearner<'a> {
    /// Items with no training pairs are placed by the future term alone.
    pub fn new(
        train: &'a ImplicitDataset,
        users: &'a Matrix,
        valid: Option<&'a ImplicitDataset>,
        config: TreeLearnConfig,
    ) -> Result<Self> {
        if config.arity < 2 {
            return Err(Error::config(format!("arity must be at least 2, got {}", config.arity)));
        }
        if train.n_items() == 0 {
            return Err(Error::data("no items to place"));
        }
        let reps = surrogate_reps_lenient(train, users)?;
        Ok(TreeLearner { train, users, valid, config, reps })
    }

    pub fn reps(&self) -> &SurrogateReps {
        &self.reps
    }

    pub fn start(&self) -> TreeCheckpoint {
        let dim = self.users.cols();
        let mut cp = TreeCheckpoint {
            arity: self.config.arity,
            dim,
            item_count: self.train.n_items(),
            levels_done: 0,
            nodes: vec![PartialNode { parent: None, item: None, params: encode_f64s(&vec![0.0; dim + 1]) }],
            frontier: Vec::new(),
            progress: Vec::new(),
        };
        if self.train.n_items() == 1 {
            cp.push_node(0, &vec![0.0; dim], 0.0, Some(0));
        } else {
            cp.frontier.push(FrontierNode { node: 0, items: (0..self.train.n_items() as ItemId).collect() });
        }
        cp
    }

    /// Checks that a checkpoint matches this learner's shape.
    pub fn check(&self, cp: &TreeCheckpoint) -> Result<()> {
        if cp.arity != self.config.arity || cp.dim != self.users.cols() || cp.item_count != self.train.n_items() {
            return Err(Error::config("tree checkpoint does not match the learner configuration"));
        }
        Ok(())
    }

    fn learn_node(&self, level: usize, index: usize, frontier: &FrontierNode) -> Result<NodeResult> {
        let k = self.config.arity;
        let seed = derive_seed(derive_seed(self.config.seed, level as u64), index as u64);
        let slots = match self.config.init {
            InitMode::Random => init_assign_random(frontier.items.len(), k, derive_seed(seed, 1)),
            InitMode::Cluster => {
                init_assign_cluster(&frontier.items, &self.reps, k, derive_seed(seed, 1), self.config.cluster_raw)
            }
        };
        let factors = Matrix::gaussian(k, self.users.cols(), INIT_FACTOR_STD, &mut rng_from_seed(derive_seed(seed, 2)));
        let mut state = NodeState::new(
            frontier.node,
            frontier.items.clone(),
            slots,
            factors,
            vec![0.0; k],
            &self.reps,
            self.config.sign,
        )?;
        let outcome = learn_level(&mut state, self.train, self.users, &self.reps, &self.config.level, derive_seed(seed, 3))?;
        let forced = state.occupied_slots().len() < 2;
        if forced {
            debug!(
                "level {level}: node {} kept all {} items in one child; forcing a median split",
                frontier.node,
                frontier.items.len()
            );
            median_split(&mut state, &self.reps);
            warm_start_biases(&mut state, &self.reps);
            update_node_params(&mut state, self.train, self.users, &self.config.level.fit, derive_seed(seed, 4))?;
        }
        // Keep the fit only if it beats the count model it started from.
        let judge = self.valid.unwrap_or(self.train);
        let fitted = state.digit_loglik(judge, self.users);
        let mut fallback = state.clone();
        fallback.factors = Matrix::zeros(k, self.users.cols());
        warm_start_biases(&mut fallback, &self.reps);
        let reverted = fallback.digit_loglik(judge, self.users) > fitted;
        if reverted {
            debug!("level {level}: node {} reverts to the count model", frontier.node);
            state = fallback;
        }
        Ok(NodeResult { state, outcome, forced, reverted })
    }

    /// Learns the next level of every frontier node.
    pub fn step(&self, cp: &mut TreeCheckpoint) -> Result<()> {
        self.check(cp)?;
        if cp.is_done() {
            return Ok(());
        }
        let level = cp.levels_done + 1;
        let frontier = std::mem::take(&mut cp.frontier);
        let results: Vec<NodeResult> = if self.config.threads <= 1 {
            frontier.iter().enumerate().map(|(f, n)| self.learn_node(level, f, n)).collect::<Result<_>>()?
        } else {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(self.config.threads)
                .build()
                .map_err(|e| Error::config(format!("thread pool: {e}")))?;
            pool.install(|| {
                frontier.par_iter().enumerate().map(|(f, n)| self.learn_node(level, f, n)).collect::<Result<_>>()
            })?
        };
        let level_state = LevelState { level, nodes: results.iter().map(|r| r.state.clone()).collect() };
        let mut progress = LevelProgress {
            level,
            nodes: frontier.len(),
            digits_changed: 0,
            proxy_objective: 0.0,
            forced_splits: 0,
            reverted_nodes: 0,
            valid_loglik: None,
        };
        for (result, state) in results.iter().zip(&level_state.nodes) {
            progress.digits_changed += result.outcome.digits_changed;
            progress.forced_splits += result.forced as usize;
            progress.reverted_nodes += result.reverted as usize;
            progress.proxy_objective += state.proxy_objective(self.train, self.users);
            for slot in state.occupied_slots() {
                let items = state.child_items(slot);
                let item = if items.len() == 1 { Some(items[0]) } else { None };
                let child = cp.push_node(state.node(), state.factors().row(slot), state.biases()[slot], item);
                if items.len() > 1 {
                    cp.frontier.push(FrontierNode { node: child, items });
                }
            }
        }
        cp.levels_done = level;
        progress.valid_loglik = self.valid.map(|v| self.partial_loglik(cp, v));
        info!(
            "level {level}: {} nodes, {} digit changes, {} forced splits, proxy {:.4}, valid loglik {:?}",
            progress.nodes,
            progress.digits_changed,
            progress.forced_splits,
            progress.proxy_objective,
            progress.valid_loglik
        );
        cp.progress.push(progress);
        Ok(())
    }

    /// Log-likelihood of `data` under the partial tree, with add-one
    /// smoothed item counts below each unfinished node.
    pub fn partial_loglik(&self, cp: &TreeCheckpoint, data: &ImplicitDataset) -> f64 {
        let n = cp.nodes.len();
        let mut children = vec![Vec::new(); n];
        for (id, node) in cp.nodes.iter().enumerate() {
            if let Some(p) = node.parent {
                children[p].push(id);
            }
        }
        let params: Vec<(Vec<f64>, f64)> = (0..n).map(|id| cp.params(id)).collect();
        let mut home = vec![usize::MAX; cp.item_count];
        let mut count_term = vec![0.0; cp.item_count];
        for (id, node) in cp.nodes.iter().enumerate() {
            if let Some(i) = node.item {
                home[i as usize] = id;
            }
        }
        for f in &cp.frontier {
            let weight = |i: ItemId| self.reps.occurrences(i) as f64 + 1.0;
            let total: f64 = f.items.iter().map(|&i| weight(i)).sum();
            for &i in &f.items {
                home[i as usize] = f.node;
                count_term[i as usize] = (weight(i) / total).ln();
            }
        }
        let mut scores = Vec::new();
        let mut total = 0.0;
        for &(u, i) in data.pairs() {
            let user = self.users.row(u as usize);
            let mut ll = count_term[i as usize];
            let mut node = home[i as usize];
            while let Some(parent) = cp.nodes[node].parent {
                scores.clear();
                scores.extend(children[parent].iter().map(|&c| dot(user, &params[c].0) + params[c].1));
                let pos = children[parent].iter().position(|&c| c == node).expect("child listed");
                ll += scores[pos] - crate::linalg::log_sum_exp(&scores);
                node = parent;
            }
            total += ll;
        }
        total
    }

    pub fn finish(&self, cp: &TreeCheckpoint) -> Result<LearnedTree> {
        self.check(cp)?;
        if !cp.is_done() {
            return Err(Error::contract("tree learning has not finished"));
        }
        let mut b = TreeBuilder::new(cp.arity, cp.dim);
        for id in 1..cp.nodes.len() {
            let (factor, bias) = cp.params(id);
            let node = b.add_child(cp.nodes[id].parent.expect("non-root parent"), &factor, bias);
            debug_assert_eq!(node, id);
            if let Some(item) = cp.nodes[id].item {
                b.set_item(node, item);
            }
        }
        let tree = b.finish(cp.item_count);
        let violations = crate::itemtree::validate(&tree);
        if let Some(v) = violations.first() {
            return Err(Error::data(format!("learned tree is invalid: {v}")));
        }
        let lengths: Vec<usize> = tree.code_lengths().collect();
        info!(
            "learned tree: {} nodes, code length {}..{}",
            tree.node_count(),
            lengths.iter().min().unwrap_or(&0),
            lengths.iter().max().unwrap_or(&0)
        );
        Ok(LearnedTree { tree, progress: cp.progress.clone() })
    }
}

/// Learns a complete tree without checkpointing.
pub fn learn_tree(
    train: &ImplicitDataset,
    users: &Matrix,
    valid: Option<&ImplicitDataset>,
    config: &TreeLearnConfig,
) -> Result<LearnedTree> {
    let learner = TreeLearner::new(train, users, valid, config.clone())?;
    let mut cp = learner.start();
    while !cp.is_done() {
        learner.step(&mut cp)?;
        debug!("frontier after level {}: {} nodes", cp.levels_done, cp.frontier.len());
    }
    learner.finish(&cp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::IdMap;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn dataset(n_users: usize, n_items: usize, pairs: Vec<(u32, u32)>) -> ImplicitDataset {
        let mut users = IdMap::new();
        (0..n_users).for_each(|u| {
            users.get_or_insert(&u.to_string());
        });
        let mut items = IdMap::new();
        (0..n_items).for_each(|i| {
            items.get_or_insert(&i.to_string());
        });
        ImplicitDataset::from_pairs(Arc::new(users), Arc::new(items), pairs).unwrap()
    }

    fn random_instance(n_users: usize, n_items: usize, d: usize, seed: u64) -> (ImplicitDataset, Matrix) {
        let mut rng = rng_from_seed(seed);
        let mut pairs = Vec::new();
        for i in 0..n_items as u32 {
            let deg = rng.random_range(1..=n_users.min(6));
            let mut who: Vec<u32> = (0..n_users as u32).collect();
            who.shuffle(&mut rng);
            pairs.extend(who[..deg].iter().map(|&u| (u, i)));
        }
        (dataset(n_users, n_items, pairs), Matrix::gaussian(n_users, d, 1.0, &mut rng))
    }

    #[test]
    fn surrogates_sum_user_vectors() {
        let users = Matrix::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, 5.0, 5.0]);
        let data = dataset(3, 3, vec![(0, 0), (1, 0), (2, 1), (0, 2)]);
        let r = surrogate_reps(&data, &users).unwrap();
        assert_eq!(r.rep(0), &[1.0, 1.0]);
        assert_eq!(r.selections(0), 2);
        assert_eq!(r.rep(1), &[5.0, 5.0]);
        let sparse = dataset(3, 4, vec![(0, 0)]);
        assert!(matches!(surrogate_reps(&sparse, &users), Err(Error::Data(_))));
    }

    #[test]
    fn surrogates_match_naive_loop() {
        let (data, users) = random_instance(9, 30, 4, 3);
        let r = surrogate_reps(&data, &users).unwrap();
        for i in 0..30u32 {
            let mut naive = vec![0.0; 4];
            for u in 0..9u32 {
                if data.pairs().contains(&(u, i)) {
                    for c in 0..4 {
                        naive[c] += users.row(u as usize)[c];
                    }
                }
            }
            assert_eq!(r.rep(i), naive.as_slice());
        }
    }

    #[test]
    fn ftilde_values() {
        assert_eq!(ftilde(&[1.0, 1.0]).unwrap(), 0.0);
        assert!((ftilde(&[2.0, 2.0]).unwrap() + 4.0 * 2f64.ln()).abs() < 1e-12);
        assert!((ftilde(&[4.0, 0.0]).unwrap() + 4.0 * 4f64.ln()).abs() < 1e-12);
        assert!(ftilde(&[-1.0, 2.0]).is_err());
    }

    proptest! {
        #[test]
        fn ftilde_is_eq11_minus_constant(groups in proptest::collection::vec(proptest::collection::vec(1u32..50, 0..6), 2..5)) {
            let mut full = 0.0;
            let mut constant = 0.0;
            let z: Vec<f64> = groups.iter().map(|g| g.iter().map(|&n| n as f64).sum()).collect();
            for (g, &zc) in groups.iter().zip(&z) {
                for &n in g {
                    let n = n as f64;
                    full += n * (n / zc).ln();
                    constant += n * n.ln();
                }
            }
            prop_assert!((full - constant - ftilde(&z).unwrap()).abs() < 1e-8 * (1.0 + full.abs()));
        }

        #[test]
        fn count_model_is_the_mle(counts in proptest::collection::vec(1u32..40, 2..10), seed: u64) {
            let total: f64 = counts.iter().map(|&n| n as f64).sum();
            let ll = |p: &[f64]| counts.iter().zip(p).map(|(&n, q)| n as f64 * q.ln()).sum::<f64>();
            let mle: Vec<f64> = counts.iter().map(|&n| n as f64 / total).collect();
            let best = ll(&mle);
            let mut rng = rng_from_seed(seed);
            for _ in 0..100 {
                let raw: Vec<f64> = mle.iter().map(|p| p * (0.5 + rng.random::<f64>())).collect();
                let s: f64 = raw.iter().sum();
                let q: Vec<f64> = raw.iter().map(|x| x / s).collect();
                prop_assert!(ll(&q) <= best + 1e-9);
            }
        }
    }

    fn zero_reps(counts: &[u64]) -> SurrogateReps {
        SurrogateReps {
            reps: Matrix::zeros(counts.len(), 2),
            selections: counts.to_vec(),
            occurrences: counts.to_vec(),
        }
    }

    #[test]
    fn digit_update_prefers_the_lighter_child() {
        let reps = zero_reps(&[1, 1, 1, 1, 1]);
        let mut s =
            NodeState::new(0, vec![0, 1, 2, 3, 4], vec![0, 0, 0, 1, 0], Matrix::zeros(2, 2), vec![0.0; 2], &reps, FutureSign::Derived)
                .unwrap();
        // item 4 out: child 1 holds 3, child 2 holds 1
        assert_eq!(digit_update(&mut s, &reps, 4).unwrap(), 2);
        assert_eq!(s.counts(), &[3.0, 2.0]);
        assert!(digit_update(&mut s, &reps, 9).is_err());
        let sym = zero_reps(&[1, 1]);
        let mut t = NodeState::new(0, vec![0, 1], vec![1, 0], Matrix::zeros(2, 2), vec![0.0; 2], &sym, FutureSign::Derived)
            .unwrap();
        // item 1 joins the empty child
        assert_eq!(digit_update(&mut t, &sym, 1).unwrap(), 1);
        let mut u = NodeState::new(0, vec![0], vec![1], Matrix::zeros(2, 2), vec![0.0; 2], &sym, FutureSign::Derived).unwrap();
        assert_eq!(digit_update(&mut u, &sym, 0).unwrap(), 1);
    }

    #[test]
    fn ftilde_cache_stays_coherent() {
        let (data, users) = random_instance(8, 40, 3, 5);
        let reps = surrogate_reps(&data, &users).unwrap();
        let mut rng = rng_from_seed(1);
        let mut s = NodeState::new(
            0,
            (0..40).collect(),
            init_assign_random(40, 3, 2),
            Matrix::gaussian(3, 3, 1.0, &mut rng),
            vec![0.1, -0.2, 0.3],
            &reps,
            FutureSign::Derived,
        )
        .unwrap();
        let total: f64 = s.counts().iter().sum();
        for _ in 0..2000 {
            digit_update(&mut s, &reps, rng.random_range(0..40)).unwrap();
        }
        assert!((s.cached_ftilde() - s.recomputed_ftilde()).abs() < 1e-9);
        assert_eq!(s.counts().iter().sum::<f64>(), total);
    }

    #[test]
    fn sweeps_never_decrease_the_proxy() {
        for seed in 0..10 {
            let (data, users) = random_instance(10, 50, 3, seed);
            let reps = surrogate_reps(&data, &users).unwrap();
            let mut rng = rng_from_seed(seed + 100);
            let mut s = NodeState::new(
                0,
                (0..50).collect(),
                init_assign_random(50, 2, seed),
                Matrix::gaussian(2, 3, 0.5, &mut rng),
                vec![0.3, -0.3],
                &reps,
                FutureSign::Derived,
            )
            .unwrap();
            let mut last = s.proxy_objective(&data, &users);
            for _ in 0..4 {
                s.sweep(&reps);
                let now = s.proxy_objective(&data, &users);
                assert!(now >= last - 1e-9, "seed {seed}: {now} < {last}");
                last = now;
            }
        }
    }

    #[test]
    fn node_fit_separates_orthogonal_users() {
        let users = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let data = dataset(2, 2, vec![(0, 0), (1, 1)]);
        let reps = surrogate_reps(&data, &users).unwrap();
        let mut s = NodeState::new(0, vec![0, 1], vec![0, 1], Matrix::zeros(2, 2), vec![0.0; 2], &reps, FutureSign::Derived)
            .unwrap();
        let untouched = s.clone();
        let zero = NodeFitConfig { passes: 0, ..NodeFitConfig::default() };
        update_node_params(&mut s, &data, &users, &zero, 0).unwrap();
        assert_eq!(s, untouched);
        let cfg = NodeFitConfig { passes: 200, learning_rate: 0.5, decay: 1.0, l2: 0.0 };
        update_node_params(&mut s, &data, &users, &cfg, 0).unwrap();
        let mut gf = vec![0.0; 4];
        let mut gb = vec![0.0; 2];
        for (u, label) in [(0usize, 0usize), (1, 1)] {
            let lp = mlr_log_prob_gradient(s.factors(), s.biases(), users.row(u), label, &mut gf, &mut gb);
            assert!(lp.exp() > 0.9);
        }
    }

    #[test]
    fn mlr_gradient_matches_finite_differences() {
        let mut rng = rng_from_seed(7);
        let mut f = Matrix::gaussian(3, 4, 1.0, &mut rng);
        let mut b = vec![0.2, -0.4, 0.1];
        let user = [0.3, -1.2, 0.8, 0.5];
        let mut gf = vec![0.0; 12];
        let mut gb = vec![0.0; 3];
        mlr_log_prob_gradient(&f, &b, &user, 1, &mut gf, &mut gb);
        let (mut sf, mut sb) = (vec![0.0; 12], vec![0.0; 3]);
        let h = 1e-5;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-2);
        for k in 0..12 {
            let orig = f.as_slice()[k];
            f.as_mut_slice()[k] = orig + h;
            let up = mlr_log_prob_gradient(&f, &b, &user, 1, &mut sf, &mut sb);
            f.as_mut_slice()[k] = orig - h;
            let down = mlr_log_prob_gradient(&f, &b, &user, 1, &mut sf, &mut sb);
            f.as_mut_slice()[k] = orig;
            assert!(rel(gf[k], (up - down) / (2.0 * h)) < 1e-4);
        }
        for k in 0..3 {
            let orig = b[k];
            b[k] = orig + h;
            let up = mlr_log_prob_gradient(&f, &b, &user, 1, &mut sf, &mut sb);
            b[k] = orig - h;
            let down = mlr_log_prob_gradient(&f, &b, &user, 1, &mut sf, &mut sb);
            b[k] = orig;
            assert!(rel(gb[k], (up - down) / (2.0 * h)) < 1e-4);
        }
    }

    #[test]
    fn two_items_end_in_different_children() {
        let users = Matrix::from_vec(2, 2, vec![0.5, -0.2, 0.1, 0.4]);
        let data = dataset(2, 2, vec![(0, 0), (1, 1)]);
        let reps = surrogate_reps(&data, &users).unwrap();
        for seed in 0..20 {
            let mut s = NodeState::new(
                0,
                vec![0, 1],
                init_assign_random(2, 2, seed),
                Matrix::gaussian(2, 2, 0.01, &mut rng_from_seed(seed)),
                vec![0.0; 2],
                &reps,
                FutureSign::Derived,
            )
            .unwrap();
            learn_level(&mut s, &data, &users, &reps, &LevelConfig::default(), seed).unwrap();
            assert_ne!(s.slots()[0], s.slots()[1], "seed {seed}");
        }
    }

    #[test]
    fn zero_rounds_is_identity() {
        let (data, users) = random_instance(5, 10, 2, 1);
        let reps = surrogate_reps(&data, &users).unwrap();
        let mut s = NodeState::new(
            0,
            (0..10).collect(),
            init_assign_random(10, 2, 1),
            Matrix::zeros(2, 2),
            vec![0.0; 2],
            &reps,
            FutureSign::Derived,
        )
        .unwrap();
        let before = s.clone();
        let cfg = LevelConfig { rounds: 0, ..LevelConfig::default() };
        learn_level(&mut s, &data, &users, &reps, &cfg, 3).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn random_assignment_properties() {
        assert_eq!(init_assign_random(100, 3, 9), init_assign_random(100, 3, 9));
        let a = init_assign_random(10_000, 2, 4);
        let ones = a.iter().filter(|&&s| s == 1).count() as f64;
        assert!((ones - 5000.0).abs() < 150.0);
        let single = init_assign_random(1, 4, 5);
        assert!(single.len() == 1 && single[0] < 4);
    }

    #[test]
    fn cluster_assignment_cases() {
        let mut rng = rng_from_seed(2);
        let mut rows = Vec::new();
        for i in 0..20 {
            let centre = if i < 10 { 5.0 } else { -5.0 };
            rows.extend([centre + rng.random_range(-0.5..0.5), centre + rng.random_range(-0.5..0.5)]);
        }
        let reps = SurrogateReps { reps: Matrix::from_vec(20, 2, rows), selections: vec![1; 20], occurrences: vec![1; 20] };
        let items: Vec<ItemId> = (0..20).collect();
        for seed in 0..5 {
            let a = init_assign_cluster(&items, &reps, 2, seed, false);
            assert!(a[..10].iter().all(|&s| s == a[0]));
            assert!(a[10..].iter().all(|&s| s == a[10]));
            assert_ne!(a[0], a[10]);
        }
        let same = SurrogateReps { reps: Matrix::from_vec(6, 2, vec![1.0; 12]), selections: vec![2; 6], occurrences: vec![2; 6] };
        let a = init_assign_cluster(&(0..6).collect::<Vec<_>>(), &same, 3, 1, false);
        assert!(a.iter().all(|&s| s == a[0]));
        assert_eq!(init_assign_cluster(&[4, 5, 6], &reps, 3, 1, false), vec![0, 1, 2]);
        assert_eq!(init_assign_cluster(&[4], &reps, 3, 1, false), vec![0]);
    }

    fn planted(seed: u64) -> (ImplicitDataset, Matrix) {
        let mut rng = rng_from_seed(seed);
        let mut pairs = Vec::new();
        for u in 0..20u32 {
            let base = if u < 10 { 0 } else { 8 };
            for i in 0..8 {
                if rng.random_bool(0.7) {
                    pairs.push((u, base + i));
                }
            }
            pairs.push((u, base + (u % 8)));
        }
        pairs.sort();
        pairs.dedup();
        let mut users = Vec::new();
        for u in 0..20 {
            let sign = if u < 10 { 1.0 } else { -1.0 };
            users.extend([sign + rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)]);
        }
        (dataset(20, 16, pairs), Matrix::from_vec(20, 2, users))
    }

    #[test]
    fn learned_tree_recovers_planted_groups() {
        for seed in 0..5 {
            let (data, users) = planted(seed);
            for init in [InitMode::Cluster, InitMode::Random] {
                let cfg = TreeLearnConfig { init, seed, ..TreeLearnConfig::default() };
                let valid = planted(seed + 1000).0;
                let learned = learn_tree(&data, &users, Some(&valid), &cfg).unwrap();
                let top = |i: ItemId| learned.tree.code_of(i).unwrap().digits()[0];
                assert!((0..8).all(|i| top(i) == top(0)), "seed {seed} {init:?}");
                assert!((8..16).all(|i| top(i) == top(8)));
                assert_ne!(top(0), top(8));
                let lls: Vec<f64> = learned.progress.iter().map(|p| p.valid_loglik.unwrap()).collect();
                assert!(lls.windows(2).all(|w| w[1] >= w[0] - 1e-9), "seed {seed} {init:?}: {lls:?}");
            }
        }
    }

    #[test]
    fn two_items_give_depth_one_tree_and_threads_do_not_matter() {
        let users = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let data = dataset(2, 2, vec![(0, 0), (1, 1)]);
        let t = learn_tree(&data, &users, None, &TreeLearnConfig::default()).unwrap().tree;
        assert!(t.code_lengths().all(|l| l == 1));
        let (big, u) = random_instance(12, 60, 3, 8);
        let one = learn_tree(&big, &u, None, &TreeLearnConfig { seed: 2, ..Default::default() }).unwrap();
        let four = learn_tree(&big, &u, None, &TreeLearnConfig { seed: 2, threads: 4, ..Default::default() }).unwrap();
        assert_eq!(crate::itemtree::serialize(&one.tree), crate::itemtree::serialize(&four.tree));
    }

    #[test]
    fn checkpoint_resume_matches_uninterrupted() {
        let (data, users) = random_instance(10, 40, 3, 4);
        let cfg = TreeLearnConfig { arity: 3, init: InitMode::Random, seed: 5, ..Default::default() };
        let learner = TreeLearner::new(&data, &users, None, cfg.clone()).unwrap();
        let mut cp = learner.start();
        learner.step(&mut cp).unwrap();
        let restored = TreeCheckpoint::from_bytes(&cp.to_bytes()).unwrap();
        assert_eq!(restored, cp);
        let mut cp = restored;
        while !cp.is_done() {
            learner.step(&mut cp).unwrap();
        }
        let resumed = learner.finish(&cp).unwrap();
        let direct = learn_tree(&data, &users, None, &cfg).unwrap();
        assert_eq!(crate::itemtree::serialize(&resumed.tree), crate::itemtree::serialize(&direct.tree));
    }

    #[test]
    fn zero_count_items_are_still_placed() {
        let users = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let data = dataset(2, 7, vec![(0, 0), (1, 1), (0, 2)]);
        let t = learn_tree(&data, &users, None, &TreeLearnConfig::default()).unwrap().tree;
        assert!(crate::itemtree::validate(&t).is_empty());
        assert_eq!(t.item_count(), 7);
    }
}
