//! Collaborative Item Selection models.
//!
//! Both variants model `P(i | u)`: [`FlatModel`] normalizes over the whole
//! inventory, [`HierModel`] factorizes the choice along an [`ItemTree`]
//! path. Training is plain stochastic gradient ascent on the log-likelihood,
//! one update per (user, item) pair.
//!
//! [`ItemTree`]: crate::itemtree::ItemTree

mod flat;
mod hier;

pub use flat::{flat_prob, train_flat, train_flat_from, FlatGradient, FlatModel};
pub use hier::{finetune, hier_loglik, train_hier, train_hier_observed, HierGradient, HierModel};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::ImplicitDataset;
use crate::eval::{rank_candidates, Scorer};
use crate::linalg::rng_from_seed;
use crate::{Error, ItemId, Result, UserId};

/// Factor dimension used throughout the experiments.
pub const DEFAULT_DIM: usize = 25;
/// Standard deviation of initial user factors.
pub const USER_INIT_STD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Per-epoch multiplicative learning-rate decay.
    pub decay: f64,
    pub epochs: usize,
    pub l2: f64,
    pub seed: u64,
    pub freeze_users: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.02,
            decay: 0.9,
            epochs: 20,
            l2: 1e-2,
            seed: 0,
            freeze_users: false,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning rate {} must be finite and >= 0", self.learning_rate)));
        }
        if !(self.l2 >= 0.0) || !(self.decay > 0.0) {
            return Err(Error::config("l2 must be >= 0 and decay > 0"));
        }
        Ok(())
    }

    pub fn rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.decay.powi(epoch as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loglik: f64,
}

#[derive(Debug, Clone)]
pub struct Trained<M> {
    pub model: M,
    pub epochs: Vec<EpochLog>,
}

/// Shared SGD driver: shuffles the pairs each epoch, calls `step` per pair,
/// then checks for divergence and records the training log-likelihood.
pub(crate) fn run_epochs<M>(
    model: &mut M,
    data: &ImplicitDataset,
    config: &TrainConfig,
    stage: &str,
    mut step: impl FnMut(&mut M, UserId, ItemId, f64),
    loglik: impl Fn(&M) -> Result<f64>,
    finite: impl Fn(&M) -> bool,
    observer: &mut dyn FnMut(&EpochLog, &M),
) -> Result<Vec<EpochLog>> {
    config.check()?;
    if config.epochs > 0 && data.is_empty() {
        return Err(Error::data("no training pairs"));
    }
    let mut rng = rng_from_seed(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut logs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let lr = config.rate_at(epoch);
        for &p in &order {
            let (u, i) = data.pairs()[p];
            step(model, u, i, lr);
        }
        let ll = loglik(model)?;
        if !finite(model) || !ll.is_finite() {
            return Err(Error::divergence(stage, format!("non-finite parameters after epoch {epoch}")));
        }
        let log = EpochLog { epoch, learning_rate: lr, train_loglik: ll };
        observer(&log, model);
        logs.push(log);
    }
    Ok(logs)
}

/// Highest-scoring `k` candidates, ties broken by ascending item index.
pub fn topk<S: Scorer + ?Sized>(
    scorer: &S,
    user: UserId,
    candidates: &[ItemId],
    k: usize,
) -> Result<Vec<(ItemId, f64)>> {
    if k == 0 {
        return Err(Error::contract("k must be at least 1"));
    }
    let mut ranked = rank_candidates(scorer, user, candidates)?;
    ranked.truncate(k);
    Ok(ranked)
}
