use super::flat::centred_log_popularity;
use super::{run_epochs, EpochLog, FlatModel, TrainConfig, Trained, USER_INIT_STD};
use crate::dataset::ImplicitDataset;
use crate::eval::Scorer;
use crate::itemtree::{validate, ItemTree, NodeId, TreeBuilder};
use crate::linalg::{axpy, dot, rng_from_seed, softmax_in_place, Matrix};
use crate::params::ParamFile;
use crate::{Error, ItemId, Result, UserId};

/// Tree-structured CIS model: user factors plus an [`ItemTree`] that owns
/// the node parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct HierModel {
    users: Matrix,
    tree: ItemTree,
}

/// Gradient of `ln P(i|u)` for one pair. Only the children of nodes on the
/// item's path appear in `nodes`.
#[derive(Debug, Clone, Default)]
pub struct HierGradient {
    pub user: Vec<f64>,
    pub nodes: Vec<NodeId>,
    /// `nodes.len() × D`, row-major.
    pub factors: Vec<f64>,
    pub biases: Vec<f64>,
}

impl HierModel {
    pub fn new(users: Matrix, tree: ItemTree) -> Result<Self> {
        if users.cols() != tree.dim() {
            return Err(Error::config(format!(
                "user factors have dimension {} but the tree has {}",
                users.cols(),
                tree.dim()
            )));
        }
        let violations = validate(&tree);
        if let Some(v) = violations.first() {
            return Err(Error::data(format!("invalid tree ({} violations, first: {v})", violations.len())));
        }
        Ok(HierModel { users, tree })
    }

    /// Gaussian user factors for an existing tree.
    pub fn init(n_users: usize, tree: ItemTree, seed: u64) -> Result<Self> {
        let users = Matrix::gaussian(n_users, tree.dim(), USER_INIT_STD, &mut rng_from_seed(seed));
        HierModel::new(users, tree)
    }

    /// Depth-1 tree whose `k`-th leaf is item `k-1`, copying `V` and `c` into
    /// the leaf parameters.
    pub fn from_flat(flat: &FlatModel) -> Result<Self> {
        let n = flat.n_items();
        let mut b = TreeBuilder::new(n.max(2), flat.dim());
        for i in 0..n {
            let leaf = b.add_child(0, flat.items().row(i), flat.biases()[i]);
            b.set_item(leaf, i as ItemId);
        }
        HierModel::new(flat.users().clone(), b.finish(n))
    }

    /// Sets every non-root bias to the centred log of its subtree's smoothed
    /// popularity `Σ (N_i + 1)`, so that with zero factors the model
    /// reproduces item popularity.
    pub fn set_popularity_biases(&mut self, item_counts: &[u64]) {
        let tree = &mut self.tree;
        let mut mass = vec![0.0f64; tree.node_count()];
        for item in 0..tree.item_count() as ItemId {
            let leaf = tree.leaf_of(item).expect("valid tree");
            let w = item_counts.get(item as usize).copied().unwrap_or(0) as f64 + 1.0;
            let mut node = Some(leaf);
            while let Some(n) = node {
                mass[n] += w;
                node = tree.parent(n);
            }
        }
        for parent in 0..tree.node_count() {
            let children = tree.children(parent).to_vec();
            if children.is_empty() {
                continue;
            }
            let counts: Vec<u64> = children.iter().map(|&c| mass[c] as u64 - 1).collect();
            for (&c, b) in children.iter().zip(centred_log_popularity(&counts)) {
                *tree.bias_mut(c) = b;
            }
        }
    }

    pub fn users(&self) -> &Matrix {
        &self.users
    }

    pub fn users_mut(&mut self) -> &mut Matrix {
        &mut self.users
    }

    pub fn user(&self, user: UserId) -> &[f64] {
        self.users.row(user as usize)
    }

    pub fn tree(&self) -> &ItemTree {
        &self.tree
    }

    pub fn tree_mut(&mut self) -> &mut ItemTree {
        &mut self.tree
    }

    pub fn into_parts(self) -> (Matrix, ItemTree) {
        (self.users, self.tree)
    }

    pub fn n_users(&self) -> usize {
        self.users.rows()
    }

    fn check_user(&self, user: UserId) -> Result<()> {
        if user as usize >= self.n_users() {
            return Err(Error::lookup(format!("user {user} out of range")));
        }
        Ok(())
    }

    pub fn item_log_prob(&self, user: UserId, item: ItemId) -> Result<f64> {
        self.check_user(user)?;
        self.tree.item_log_prob(self.user(user), item)
    }

    pub fn item_prob(&self, user: UserId, item: ItemId) -> Result<f64> {
        Ok(self.item_log_prob(user, item)?.exp())
    }

    pub fn is_finite(&self) -> bool {
        self.users.is_finite() && self.tree.params_finite()
    }

    /// Writes the gradient of `ln P(item | user)` into `grad`.
    pub fn pair_gradient(&self, user: UserId, item: ItemId, grad: &mut HierGradient) -> Result<()> {
        let d = self.tree.dim();
        let path = self.tree.path_of(item)?;
        let u = self.user(user);
        grad.user.clear();
        grad.user.resize(d, 0.0);
        grad.nodes.clear();
        grad.factors.clear();
        grad.biases.clear();
        let mut probs = Vec::with_capacity(self.tree.arity());
        let mut parent = self.tree.root();
        for &target in &path {
            let children = self.tree.children(parent);
            probs.clear();
            probs.extend(children.iter().map(|&c| dot(u, self.tree.factor(c)) + self.tree.bias(c)));
            softmax_in_place(&mut probs);
            for (&c, &p) in children.iter().zip(&probs) {
                let coef = if c == target { 1.0 } else { 0.0 } - p;
                axpy(coef, self.tree.factor(c), &mut grad.user);
                grad.nodes.push(c);
                grad.factors.extend(u.iter().map(|x| coef * x));
                grad.biases.push(coef);
            }
            parent = target;
        }
        Ok(())
    }

    pub fn apply(&mut self, user: UserId, grad: &HierGradient, lr: f64, l2: f64, freeze_users: bool) {
        if lr == 0.0 {
            return;
        }
        let d = self.tree.dim();
        for (k, &node) in grad.nodes.iter().enumerate() {
            for (q, g) in self.tree.factor_mut(node).iter_mut().zip(&grad.factors[k * d..(k + 1) * d]) {
                *q += lr * (g - l2 * *q);
            }
            let b = self.tree.bias_mut(node);
            *b += lr * (grad.biases[k] - l2 * *b);
        }
        if !freeze_users {
            for (v, g) in self.users.row_mut(user as usize).iter_mut().zip(&grad.user) {
                *v += lr * (g - l2 * *v);
            }
        }
    }

    /// User-factor sibling of the tree file.
    pub fn users_param_file(&self) -> ParamFile {
        let mut f = ParamFile::new("hier-users");
        f.set_matrix("users", &self.users);
        f
    }

    pub fn from_files(users: &ParamFile, tree: ItemTree) -> Result<Self> {
        users.expect_kind("hier-users")?;
        HierModel::new(users.matrix("users")?, tree)
    }
}

impl Scorer for HierModel {
    /// Log-probabilities; the whole distribution is computed when the
    /// candidate list covers a sizeable share of the inventory.
    fn score_into(&self, user: UserId, items: &[ItemId], out: &mut Vec<f64>) {
        out.clear();
        let u = self.user(user);
        if items.len() * 8 > self.tree.item_count() {
            let all = self.tree.full_log_distribution(u);
            out.extend(items.iter().map(|&i| all[i as usize]));
        } else {
            out.extend(items.iter().map(|&i| self.tree.item_log_prob(u, i).unwrap_or(f64::NAN)));
        }
    }
}

/// Sum of `ln P(i|u)` over `pairs`.
pub fn hier_loglik(model: &HierModel, pairs: &[(UserId, ItemId)]) -> Result<f64> {
    pairs.iter().map(|&(u, i)| model.item_log_prob(u, i)).sum()
}

pub fn train_hier(model: HierModel, data: &ImplicitDataset, config: &TrainConfig) -> Result<Trained<HierModel>> {
    train_hier_observed(model, data, config, &mut |_, _| {})
}

/// Per-pair SGD over the multinomial logistic regressions along each path;
/// O(L_i · K · D) per pair.
pub fn train_hier_observed(
    mut model: HierModel,
    data: &ImplicitDataset,
    config: &TrainConfig,
    observer: &mut dyn FnMut(&EpochLog, &HierModel),
) -> Result<Trained<HierModel>> {
    if data.n_users() > model.n_users() || data.n_items() > model.tree.item_count() {
        return Err(Error::config("training data exceeds model index space"));
    }
    let mut grad = HierGradient::default();
    let (l2, freeze) = (config.l2, config.freeze_users);
    let epochs = run_epochs(
        &mut model,
        data,
        config,
        "hierarchical training",
        |m, u, i, lr| {
            m.pair_gradient(u, i, &mut grad).expect("training items are in the tree");
            m.apply(u, &grad, lr, l2, freeze);
        },
        |m| hier_loglik(m, data.pairs()),
        HierModel::is_finite,
        observer,
    )?;
    Ok(Trained { model, epochs })
}

/// [`train_hier`] with user factors unfrozen.
pub fn finetune(
    model: HierModel,
    data: &ImplicitDataset,
    config: &TrainConfig,
    observer: &mut dyn FnMut(&EpochLog, &HierModel),
) -> Result<Trained<HierModel>> {
    let config = TrainConfig { freeze_users: false, ..config.clone() };
    train_hier_observed(model, data, &config, observer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cis::train_flat_from;
    use crate::dataset::IdMap;
    use rand::Rng;
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

    fn random_model(n_users: usize, n_items: usize, k: usize, d: usize, seed: u64) -> HierModel {
        let mut rng = rng_from_seed(seed);
        let mut tree = ItemTree::random_balanced(n_items, k, d, seed).unwrap();
        for n in 0..tree.node_count() {
            for v in tree.factor_mut(n) {
                *v = rng.random_range(-1.0..1.0);
            }
            *tree.bias_mut(n) = rng.random_range(-1.0..1.0);
        }
        HierModel::new(Matrix::gaussian(n_users, d, 0.8, &mut rng), tree).unwrap()
    }

    #[test]
    fn zero_tree_loglik() {
        let mut tree = ItemTree::random_balanced(4, 2, 2, 0).unwrap();
        for n in 0..tree.node_count() {
            tree.factor_mut(n).iter_mut().for_each(|v| *v = 0.0);
        }
        let m = HierModel::new(Matrix::zeros(1, 2), tree).unwrap();
        assert!((hier_loglik(&m, &[(0, 2)]).unwrap() - 0.25f64.ln()).abs() < 1e-15);
        assert_eq!(hier_loglik(&m, &[]).unwrap(), 0.0);
        assert!(hier_loglik(&m, &[(0, 9)]).is_err());
    }

    #[test]
    fn loglik_is_sum_of_item_probs() {
        let m = random_model(5, 23, 3, 3, 2);
        let pairs: Vec<(u32, u32)> = (0..40).map(|k| (k % 5, (k * 7) % 23)).collect();
        let direct: f64 = pairs.iter().map(|&(u, i)| m.item_prob(u, i).unwrap().ln()).sum();
        assert!((hier_loglik(&m, &pairs).unwrap() - direct).abs() < 1e-10);
    }

    #[test]
    fn depth_one_tree_equals_flat_softmax() {
        for seed in 0..10 {
            let mut rng = rng_from_seed(seed);
            let flat = FlatModel::new(
                Matrix::gaussian(3, 4, 1.0, &mut rng),
                Matrix::gaussian(12, 4, 1.0, &mut rng),
                (0..12).map(|_| rng.random_range(-2.0..2.0)).collect(),
            )
            .unwrap();
            let hier = HierModel::from_flat(&flat).unwrap();
            for u in 0..3 {
                for i in 0..12 {
                    let a = hier.item_prob(u, i).unwrap();
                    let b = crate::cis::flat_prob(&flat, u, i).unwrap();
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut m = random_model(2, 8, 2, 2, 21);
        let h = 1e-5;
        let mut grad = HierGradient::default();
        for (u, i) in [(0u32, 3u32), (1, 7), (1, 0)] {
            m.pair_gradient(u, i, &mut grad).unwrap();
            let mut worst: f64 = 0.0;
            let mut fd = |m: &mut HierModel, analytic: f64, get: &dyn Fn(&mut HierModel) -> &mut f64| {
                let orig = *get(m);
                *get(m) = orig + h;
                let up = m.item_log_prob(u, i).unwrap();
                *get(m) = orig - h;
                let down = m.item_log_prob(u, i).unwrap();
                *get(m) = orig;
                let num = (up - down) / (2.0 * h);
                worst = worst.max((analytic - num).abs() / analytic.abs().max(num.abs()).max(1e-2));
            };
            for c in 0..2 {
                fd(&mut m, grad.user[c], &|m| &mut m.users.row_mut(u as usize)[c]);
            }
            for n in 0..m.tree.node_count() {
                let slot = grad.nodes.iter().position(|&x| x == n);
                for c in 0..2 {
                    let a = slot.map_or(0.0, |s| grad.factors[s * 2 + c]);
                    fd(&mut m, a, &|m| &mut m.tree.factor_mut(n)[c]);
                }
                let a = slot.map_or(0.0, |s| grad.biases[s]);
                fd(&mut m, a, &|m| m.tree.bias_mut(n));
            }
            assert!(worst < 1e-4, "max relative error {worst}");
        }
    }

    #[test]
    fn update_touches_only_path_and_siblings() {
        let m = random_model(3, 27, 3, 2, 5);
        let data = dataset(3, 27, vec![(1, 13)]);
        let cfg = TrainConfig { epochs: 1, learning_rate: 0.3, ..TrainConfig::default() };
        let after = train_hier(m.clone(), &data, &cfg).unwrap().model;
        let path = m.tree.path_of(13).unwrap();
        let mut allowed = vec![false; m.tree.node_count()];
        let mut parent = m.tree.root();
        for &n in &path {
            for &c in m.tree.children(parent) {
                allowed[c] = true;
            }
            parent = n;
        }
        for n in 0..m.tree.node_count() {
            let changed = m.tree.factor(n) != after.tree.factor(n) || m.tree.bias(n) != after.tree.bias(n);
            assert_eq!(changed, allowed[n], "node {n}");
        }
        for u in 0..3 {
            assert_eq!(m.user(u) != after.user(u), u == 1);
        }
    }

    #[test]
    fn two_leaf_single_user_mle() {
        let tree = ItemTree::random_balanced(2, 2, 2, 3).unwrap();
        let model = HierModel::init(1, tree, 3).unwrap();
        let data = dataset(1, 2, vec![(0, 0), (0, 0), (0, 1), (0, 1)]);
        let cfg = TrainConfig { learning_rate: 0.1, decay: 0.998, epochs: 1500, l2: 0.0, seed: 2, freeze_users: false };
        let out = train_hier(model, &data, &cfg).unwrap().model;
        assert!((out.item_prob(0, 0).unwrap() - 0.5).abs() < 0.02);
    }

    #[test]
    fn frozen_depth_one_matches_flat_step_for_step() {
        let data = dataset(3, 7, vec![(0, 1), (1, 1), (2, 6), (0, 3), (1, 0), (2, 2)]);
        let flat = FlatModel::init(3, data.item_counts(), 4, 11);
        let hier = HierModel::from_flat(&flat).unwrap();
        for freeze in [true, false] {
            let cfg = TrainConfig { epochs: 4, learning_rate: 0.2, freeze_users: freeze, ..TrainConfig::default() };
            let f = train_flat_from(flat.clone(), &data, &cfg, &mut |_, _| {}).unwrap().model;
            let h = train_hier(hier.clone(), &data, &cfg).unwrap().model;
            for i in 0..7u32 {
                let leaf = h.tree.leaf_of(i).unwrap();
                for (a, b) in h.tree.factor(leaf).iter().zip(f.items().row(i as usize)) {
                    assert!((a - b).abs() < 1e-12);
                }
                assert!((h.tree.bias(leaf) - f.biases()[i as usize]).abs() < 1e-12);
            }
            if freeze {
                assert_eq!(h.users(), flat.users());
            }
        }
    }

    #[test]
    fn finetune_loglik_is_monotone_with_small_steps() {
        let mut rng = rng_from_seed(4);
        let pairs: Vec<(u32, u32)> = (0..60).map(|_| (rng.random_range(0..6), rng.random_range(0..10))).collect();
        let data = dataset(6, 10, pairs);
        let model = random_model(6, 10, 2, 3, 4);
        let cfg = TrainConfig { learning_rate: 0.005, decay: 1.0, epochs: 15, l2: 0.0, ..TrainConfig::default() };
        let out = finetune(model, &data, &cfg, &mut |_, _| {}).unwrap();
        for w in out.epochs.windows(2) {
            assert!(w[1].train_loglik >= w[0].train_loglik - 1e-6, "{:?}", out.epochs);
        }
        let zero = TrainConfig { epochs: 0, ..cfg };
        let m = random_model(6, 10, 2, 3, 4);
        assert_eq!(finetune(m.clone(), &data, &zero, &mut |_, _| {}).unwrap().model, m);
    }

    #[test]
    fn popularity_biases_reproduce_counts() {
        let mut tree = ItemTree::random_balanced(5, 2, 2, 1).unwrap();
        for n in 0..tree.node_count() {
            tree.factor_mut(n).iter_mut().for_each(|v| *v = 0.0);
        }
        let mut m = HierModel::new(Matrix::zeros(1, 2), tree).unwrap();
        let counts = [9u64, 0, 4, 1, 5];
        m.set_popularity_biases(&counts);
        let total: f64 = counts.iter().map(|&c| c as f64 + 1.0).sum();
        for (i, &c) in counts.iter().enumerate() {
            assert!((m.item_prob(0, i as u32).unwrap() - (c as f64 + 1.0) / total).abs() < 1e-12);
        }
    }

    #[test]
    fn divergence_is_reported() {
        let m = random_model(2, 4, 2, 2, 1);
        let data = dataset(2, 4, vec![(0, 1), (1, 2)]);
        let cfg = TrainConfig { learning_rate: 1e300, decay: 1.0, epochs: 3, ..TrainConfig::default() };
        match train_hier(m, &data, &cfg) {
            Err(Error::Divergence { message, .. }) => assert!(message.contains("epoch")),
            other => panic!("expected divergence, got {:?}", other.map(|_| ())),
        }
    }
}
