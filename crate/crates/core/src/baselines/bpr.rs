use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::ImplicitDataset;
use crate::eval::Scorer;
use crate::linalg::{dot, rng_from_seed, Matrix};
use crate::params::ParamFile;
use crate::{Error, ItemId, Result, UserId};

/// Bayesian Personalized Ranking: `x_ui = U_u·V_i + c_i`, trained to rank
/// selected items above sampled unselected ones.
#[derive(Debug, Clone, PartialEq)]
pub struct BprModel {
    users: Matrix,
    items: Matrix,
    biases: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BprConfig {
    pub dim: usize,
    pub learning_rate: f64,
    pub l2: f64,
    /// Sampled triples per training pair.
    pub samples_per_pair: f64,
    pub item_bias: bool,
    pub init_std: f64,
    pub seed: u64,
    /// Observer interval in triples; 0 disables it.
    pub report_every: usize,
}

impl Default for BprConfig {
    fn default() -> Self {
        BprConfig {
            dim: crate::cis::DEFAULT_DIM,
            learning_rate: 0.02,
            l2: 0.03,
            samples_per_pair: 200.0,
            item_bias: true,
            init_std: 0.1,
            seed: 0,
            report_every: 0,
        }
    }
}

/// A user, one of their selected items and one unselected item.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triple {
    pub user: UserId,
    pub positive: ItemId,
    pub negative: ItemId,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BprGradient {
    /// `1 - σ(x̂)`.
    pub coefficient: f64,
    pub user: Vec<f64>,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
    pub positive_bias: f64,
    pub negative_bias: f64,
}

impl BprModel {
    pub fn new(users: Matrix, items: Matrix, biases: Option<Vec<f64>>) -> Result<Self> {
        if users.cols() != items.cols() {
            return Err(Error::config("user and item factor dimensions differ"));
        }
        if biases.as_ref().is_some_and(|b| b.len() != items.rows()) {
            return Err(Error::config("one bias per item required"));
        }
        Ok(BprModel { users, items, biases })
    }

    pub fn init(n_users: usize, n_items: usize, config: &BprConfig) -> Self {
        let mut rng = rng_from_seed(config.seed);
        BprModel {
            users: Matrix::gaussian(n_users, config.dim, config.init_std, &mut rng),
            items: Matrix::gaussian(n_items, config.dim, config.init_std, &mut rng),
            biases: config.item_bias.then(|| vec![0.0; n_items]),
        }
    }

    pub fn users(&self) -> &Matrix {
        &self.users
    }

    pub fn items(&self) -> &Matrix {
        &self.items
    }

    pub fn biases(&self) -> Option<&[f64]> {
        self.biases.as_deref()
    }

    pub fn score(&self, user: UserId, item: ItemId) -> f64 {
        let bias = self.biases.as_ref().map_or(0.0, |b| b[item as usize]);
        dot(self.users.row(user as usize), self.items.row(item as usize)) + bias
    }

    pub fn is_finite(&self) -> bool {
        self.users.is_finite() && self.items.is_finite() && self.biases.iter().flatten().all(|b| b.is_finite())
    }

    pub fn to_param_file(&self) -> ParamFile {
        let mut f = ParamFile::new("bpr");
        f.set_matrix("users", &self.users);
        f.set_matrix("items", &self.items);
        if let Some(b) = &self.biases {
            f.set_vector("item_bias", b);
        }
        f
    }

    pub fn from_param_file(f: &ParamFile) -> Result<Self> {
        f.expect_kind("bpr")?;
        let biases = f.vector("item_bias").ok();
        BprModel::new(f.matrix("users")?, f.matrix("items")?, biases)
    }
}

impl Scorer for BprModel {
    fn score_into(&self, user: UserId, items: &[ItemId], out: &mut Vec<f64>) {
        out.clear();
        out.extend(items.iter().map(|&i| self.score(user, i)));
    }
}

/// Draws `(u, i)` uniformly from the training pairs and `j` uniformly from
/// the items `u` did not select.
pub struct TripleSampler<'a> {
    data: &'a ImplicitDataset,
}

impl<'a> TripleSampler<'a> {
    pub fn new(data: &'a ImplicitDataset) -> Result<Self> {
        let n_items = data.n_items();
        if !data.pairs().iter().any(|&(u, _)| data.user_items(u).len() < n_items) {
            return Err(Error::data("no training user has an unselected item"));
        }
        Ok(TripleSampler { data })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Triple {
        let pairs = self.data.pairs();
        let n_items = self.data.n_items() as ItemId;
        loop {
            let (user, positive) = pairs[rng.random_range(0..pairs.len())];
            if self.data.user_items(user).len() == n_items as usize {
                continue;
            }
            loop {
                let negative = rng.random_range(0..n_items);
                if !self.data.user_has_item(user, negative) {
                    return Triple { user, positive, negative };
                }
            }
        }
    }
}

/// Gradient of `ln σ(x̂)` with `x̂ = x_ui - x_uj`.
pub fn bpr_gradient(model: &BprModel, t: Triple) -> BprGradient {
    let u = model.users.row(t.user as usize);
    let vi = model.items.row(t.positive as usize);
    let vj = model.items.row(t.negative as usize);
    let x = model.score(t.user, t.positive) - model.score(t.user, t.negative);
    let coef = 1.0 / (1.0 + x.exp());
    let has_bias = model.biases.is_some();
    BprGradient {
        coefficient: coef,
        user: vi.iter().zip(vj).map(|(a, b)| coef * (a - b)).collect(),
        positive: u.iter().map(|x| coef * x).collect(),
        negative: u.iter().map(|x| -coef * x).collect(),
        positive_bias: if has_bias { coef } else { 0.0 },
        negative_bias: if has_bias { -coef } else { 0.0 },
    }
}

/// One ascent step on `ln σ(x̂) - λ‖θ‖²/2` for the parameters of `t`.
pub fn bpr_step(model: &mut BprModel, t: Triple, lr: f64, l2: f64) -> Result<()> {
    let g = bpr_gradient(model, t);
    let update = |row: &mut [f64], grad: &[f64]| {
        for (p, d) in row.iter_mut().zip(grad) {
            *p += lr * (d - l2 * *p);
        }
    };
    update(model.users.row_mut(t.user as usize), &g.user);
    update(model.items.row_mut(t.positive as usize), &g.positive);
    update(model.items.row_mut(t.negative as usize), &g.negative);
    if let Some(b) = model.biases.as_mut() {
        b[t.positive as usize] += lr * (g.positive_bias - l2 * b[t.positive as usize]);
        b[t.negative as usize] += lr * (g.negative_bias - l2 * b[t.negative as usize]);
    }
    let finite = |r: &[f64]| r.iter().all(|v| v.is_finite());
    if !finite(model.users.row(t.user as usize))
        || !finite(model.items.row(t.positive as usize))
        || !finite(model.items.row(t.negative as usize))
    {
        return Err(Error::divergence("bpr training", format!("non-finite parameters at user {}", t.user)));
    }
    Ok(())
}

/// Runs `samples_per_pair × |pairs|` SGD steps on sampled triples. The
/// observer sees the model every `report_every` triples.
pub fn train_bpr(
    train: &ImplicitDataset,
    config: &BprConfig,
    observer: &mut dyn FnMut(usize, &BprModel),
) -> Result<BprModel> {
    let model = BprModel::init(train.n_users(), train.n_items(), config);
    train_bpr_from(model, train, config, observer)
}

pub fn train_bpr_from(
    mut model: BprModel,
    train: &ImplicitDataset,
    config: &BprConfig,
    observer: &mut dyn FnMut(usize, &BprModel),
) -> Result<BprModel> {
    if !(config.learning_rate >= 0.0) || !(config.l2 >= 0.0) || !(config.samples_per_pair >= 0.0) {
        return Err(Error::config("bpr learning rate, l2 and samples per pair must be >= 0"));
    }
    let steps = (config.samples_per_pair * train.len() as f64).round() as usize;
    if steps == 0 {
        return Ok(model);
    }
    let sampler = TripleSampler::new(train)?;
    let mut rng = rng_from_seed(config.seed ^ 0xB9B);
    for step in 0..steps {
        let t = sampler.sample(&mut rng);
        bpr_step(&mut model, t, config.learning_rate, config.l2)?;
        if config.report_every > 0 && (step + 1) % config.report_every == 0 {
            observer(step + 1, &model);
        }
    }
    Ok(model)
}
