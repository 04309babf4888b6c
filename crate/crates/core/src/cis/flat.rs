use rand_distr::{Distribution, Normal};

use super::{run_epochs, EpochLog, TrainConfig, Trained, USER_INIT_STD};
use crate::dataset::ImplicitDataset;
use crate::eval::Scorer;
use crate::itemtree::INIT_FACTOR_STD;
use crate::linalg::{axpy, dot, rng_from_seed, softmax_in_place, Matrix};
use crate::params::ParamFile;
use crate::{Error, ItemId, Result, UserId};

/// Softmax over the whole inventory:
/// `P(i|u) = exp(U_u·V_i + c_i) / Σ_k exp(U_u·V_k + c_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatModel {
    users: Matrix,
    items: Matrix,
    biases: Vec<f64>,
}

/// Gradient of `ln P(i|u)` for a single pair.
#[derive(Debug, Clone, Default)]
pub struct FlatGradient {
    pub user: Vec<f64>,
    /// I × D, row-major.
    pub items: Vec<f64>,
    pub biases: Vec<f64>,
}

impl FlatModel {
    pub fn new(users: Matrix, items: Matrix, biases: Vec<f64>) -> Result<Self> {
        if users.cols() != items.cols() || users.cols() == 0 {
            return Err(Error::config(format!(
                "user dim {} and item dim {} must match and be positive",
                users.cols(),
                items.cols()
            )));
        }
        if biases.len() != items.rows() {
            return Err(Error::config("one bias per item required"));
        }
        Ok(FlatModel { users, items, biases })
    }

    /// Random factors; item biases start at centred log popularity
    /// `ln(N_i + 1) - mean`.
    pub fn init(n_users: usize, item_counts: &[u64], dim: usize, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let users = Matrix::gaussian(n_users, dim, USER_INIT_STD, &mut rng);
        let normal = Normal::new(0.0, INIT_FACTOR_STD).expect("valid std");
        let items = Matrix::from_vec(
            item_counts.len(),
            dim,
            (0..item_counts.len() * dim).map(|_| normal.sample(&mut rng)).collect(),
        );
        FlatModel { users, items, biases: centred_log_popularity(item_counts) }
    }

    pub fn dim(&self) -> usize {
        self.users.cols()
    }

    pub fn n_users(&self) -> usize {
        self.users.rows()
    }

    pub fn n_items(&self) -> usize {
        self.items.rows()
    }

    pub fn users(&self) -> &Matrix {
        &self.users
    }

    pub fn users_mut(&mut self) -> &mut Matrix {
        &mut self.users
    }

    pub fn items(&self) -> &Matrix {
        &self.items
    }

    pub fn items_mut(&mut self) -> &mut Matrix {
        &mut self.items
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    pub fn biases_mut(&mut self) -> &mut [f64] {
        &mut self.biases
    }

    fn check(&self, user: UserId, item: Option<ItemId>) -> Result<()> {
        if user as usize >= self.n_users() {
            return Err(Error::lookup(format!("user {user} out of range")));
        }
        if let Some(i) = item {
            if i as usize >= self.n_items() {
                return Err(Error::lookup(format!("item {i} out of range")));
            }
        }
        Ok(())
    }

    pub fn score(&self, user: UserId, item: ItemId) -> f64 {
        dot(self.users.row(user as usize), self.items.row(item as usize)) + self.biases[item as usize]
    }

    /// Unnormalized scores for every item.
    pub fn scores(&self, user: UserId) -> Vec<f64> {
        (0..self.n_items() as ItemId).map(|i| self.score(user, i)).collect()
    }

    pub fn distribution(&self, user: UserId) -> Result<Vec<f64>> {
        self.check(user, None)?;
        let mut s = self.scores(user);
        softmax_in_place(&mut s);
        Ok(s)
    }

    pub fn log_prob(&self, user: UserId, item: ItemId) -> Result<f64> {
        self.check(user, Some(item))?;
        let s = self.scores(user);
        Ok(s[item as usize] - crate::linalg::log_sum_exp(&s))
    }

    pub fn log_likelihood(&self, pairs: &[(UserId, ItemId)]) -> Result<f64> {
        pairs.iter().map(|&(u, i)| self.log_prob(u, i)).sum()
    }

    /// Writes the gradient of `ln P(item | user)` into `grad`.
    pub fn pair_gradient(&self, user: UserId, item: ItemId, grad: &mut FlatGradient) {
        let d = self.dim();
        let n = self.n_items();
        let u = self.users.row(user as usize);
        let mut probs = self.scores(user);
        softmax_in_place(&mut probs);
        grad.user.clear();
        grad.user.resize(d, 0.0);
        grad.items.clear();
        grad.items.resize(n * d, 0.0);
        grad.biases.clear();
        grad.biases.resize(n, 0.0);
        for k in 0..n {
            let coef = if k == item as usize { 1.0 } else { 0.0 } - probs[k];
            axpy(coef, self.items.row(k), &mut grad.user);
            axpy(coef, u, &mut grad.items[k * d..(k + 1) * d]);
            grad.biases[k] = coef;
        }
    }

    /// `θ += lr (g - λ θ)` on every parameter the gradient covers.
    pub fn apply(&mut self, user: UserId, grad: &FlatGradient, lr: f64, l2: f64, freeze_users: bool) {
        if lr == 0.0 {
            return;
        }
        for (v, g) in self.items.as_mut_slice().iter_mut().zip(&grad.items) {
            *v += lr * (g - l2 * *v);
        }
        for (c, g) in self.biases.iter_mut().zip(&grad.biases) {
            *c += lr * (g - l2 * *c);
        }
        if !freeze_users {
            for (v, g) in self.users.row_mut(user as usize).iter_mut().zip(&grad.user) {
                *v += lr * (g - l2 * *v);
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.users.is_finite() && self.items.is_finite() && self.biases.iter().all(|b| b.is_finite())
    }

    pub fn to_param_file(&self) -> ParamFile {
        let mut f = ParamFile::new("flat");
        f.set_matrix("users", &self.users);
        f.set_matrix("items", &self.items);
        f.set_vector("item_bias", &self.biases);
        f
    }

    pub fn from_param_file(f: &ParamFile) -> Result<Self> {
        f.expect_kind("flat")?;
        FlatModel::new(f.matrix("users")?, f.matrix("items")?, f.vector("item_bias")?)
    }
}

pub(crate) fn centred_log_popularity(counts: &[u64]) -> Vec<f64> {
    let logs: Vec<f64> = counts.iter().map(|&n| (n as f64 + 1.0).ln()).collect();
    let mean = logs.iter().sum::<f64>() / logs.len().max(1) as f64;
    logs.into_iter().map(|l| l - mean).collect()
}

impl Scorer for FlatModel {
    fn score_into(&self, user: UserId, items: &[ItemId], out: &mut Vec<f64>) {
        out.clear();
        out.extend(items.iter().map(|&i| self.score(user, i)));
    }
}

pub fn flat_prob(model: &FlatModel, user: UserId, item: ItemId) -> Result<f64> {
    Ok(model.log_prob(user, item)?.exp())
}

/// Initializes with [`FlatModel::init`] and trains.
pub fn train_flat(data: &ImplicitDataset, config: &TrainConfig, dim: usize) -> Result<Trained<FlatModel>> {
    let model = FlatModel::init(data.n_users(), data.item_counts(), dim, config.seed);
    train_flat_from(model, data, config, &mut |_, _| {})
}

/// Exact full-softmax SGD, O(I·D) per pair.
pub fn train_flat_from(
    mut model: FlatModel,
    data: &ImplicitDataset,
    config: &TrainConfig,
    observer: &mut dyn FnMut(&EpochLog, &FlatModel),
) -> Result<Trained<FlatModel>> {
    if data.n_users() > model.n_users() || data.n_items() > model.n_items() {
        return Err(Error::config("training data exceeds model index space"));
    }
    let mut grad = FlatGradient::default();
    let (l2, freeze) = (config.l2, config.freeze_users);
    let epochs = run_epochs(
        &mut model,
        data,
        config,
        "flat training",
        |m, u, i, lr| {
            m.pair_gradient(u, i, &mut grad);
            m.apply(u, &grad, lr, l2, freeze);
        },
        |m| m.log_likelihood(data.pairs()),
        FlatModel::is_finite,
        observer,
    )?;
    Ok(Trained { model, epochs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::IdMap;
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

    #[test]
    fn uniform_and_biased_probabilities() {
        let m = FlatModel::new(Matrix::zeros(1, 2), Matrix::zeros(3, 2), vec![0.0; 3]).unwrap();
        for i in 0..3 {
            assert!((flat_prob(&m, 0, i).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        }
        let m = FlatModel::new(Matrix::zeros(1, 2), Matrix::zeros(3, 2), vec![2f64.ln(), 0.0, 0.0]).unwrap();
        let p: Vec<f64> = (0..3).map(|i| flat_prob(&m, 0, i).unwrap()).collect();
        for (a, b) in p.iter().zip([0.5, 0.25, 0.25]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(flat_prob(&m, 1, 0).is_err());
        assert!(flat_prob(&m, 0, 3).is_err());
    }

    #[test]
    fn probabilities_sum_to_one() {
        let mut rng = rng_from_seed(4);
        let m = FlatModel::new(
            Matrix::gaussian(3, 4, 2.0, &mut rng),
            Matrix::gaussian(50, 4, 2.0, &mut rng),
            vec![0.3; 50],
        )
        .unwrap();
        let total: f64 = m.distribution(2).unwrap().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let data = dataset(2, 3, vec![(0, 0), (1, 2)]);
        let init = FlatModel::init(2, data.item_counts(), 3, 5);
        let cfg = TrainConfig { learning_rate: 0.0, epochs: 3, ..TrainConfig::default() };
        let out = train_flat_from(init.clone(), &data, &cfg, &mut |_, _| {}).unwrap();
        assert_eq!(out.model, init);
        assert_eq!(out.epochs.len(), 3);
    }

    #[test]
    fn single_user_recovers_empirical_frequencies() {
        let data = dataset(1, 2, vec![(0, 0), (0, 0), (0, 1)]);
        let cfg = TrainConfig { learning_rate: 0.1, decay: 0.998, epochs: 2000, l2: 0.0, seed: 1, freeze_users: false };
        let out = train_flat(&data, &cfg, 2).unwrap();
        let p = out.model.distribution(0).unwrap();
        let tv = 0.5 * ((p[0] - 2.0 / 3.0).abs() + (p[1] - 1.0 / 3.0).abs());
        assert!(tv < 0.02, "{p:?}");
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = rng_from_seed(9);
        let mut m = FlatModel::new(
            Matrix::gaussian(4, 2, 0.7, &mut rng),
            Matrix::gaussian(6, 2, 0.7, &mut rng),
            (0..6).map(|k| k as f64 * 0.1).collect(),
        )
        .unwrap();
        let h = 1e-5;
        let mut grad = FlatGradient::default();
        for (u, i) in [(0u32, 3u32), (2, 5), (3, 0)] {
            m.pair_gradient(u, i, &mut grad);
            let mut worst: f64 = 0.0;
            let mut check = |analytic: f64, m: &mut FlatModel, get: &dyn Fn(&mut FlatModel) -> &mut f64| {
                let orig = *get(m);
                *get(m) = orig + h;
                let up = m.log_prob(u, i).unwrap();
                *get(m) = orig - h;
                let down = m.log_prob(u, i).unwrap();
                *get(m) = orig;
                let numeric = (up - down) / (2.0 * h);
                worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-2));
            };
            for r in 0..4 {
                for c in 0..2 {
                    let a = if r == u as usize { grad.user[c] } else { 0.0 };
                    check(a, &mut m, &|m| &mut m.users.row_mut(r)[c]);
                }
            }
            for k in 0..6 {
                for c in 0..2 {
                    check(grad.items[k * 2 + c], &mut m, &|m| &mut m.items.row_mut(k)[c]);
                }
                check(grad.biases[k], &mut m, &|m| &mut m.biases[k]);
            }
            assert!(worst < 1e-4, "max relative error {worst}");
        }
    }

    #[test]
    fn param_file_round_trip() {
        let data = dataset(2, 3, vec![(0, 0), (1, 2)]);
        let m = FlatModel::init(2, data.item_counts(), 3, 5);
        let back = FlatModel::from_param_file(&ParamFile::from_bytes(&m.to_param_file().to_bytes()).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
