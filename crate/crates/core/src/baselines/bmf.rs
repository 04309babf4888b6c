use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::ImplicitDataset;
use crate::eval::Scorer;
use crate::linalg::{dot, rng_from_seed, Matrix};
use crate::params::ParamFile;
use crate::{Error, ItemId, Result, UserId};

/// Weighted factorization of the binary selection matrix: minimizes
/// `Σ_{u,i} c_ui (r_ui - U_u·V_i)² + λ(‖U‖² + ‖V‖²)` with
/// `c_ui = 1 + α r_ui`.
#[derive(Debug, Clone, PartialEq)]
pub struct BmfModel {
    users: Matrix,
    items: Matrix,
    alpha: f64,
    l2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BmfConfig {
    pub dim: usize,
    pub alpha: f64,
    pub l2: f64,
    pub max_sweeps: usize,
    /// Stop once a sweep changes the objective by less than this fraction.
    pub tolerance: f64,
    pub init_std: f64,
    pub seed: u64,
    pub threads: usize,
}

impl Default for BmfConfig {
    fn default() -> Self {
        BmfConfig {
            dim: crate::cis::DEFAULT_DIM,
            alpha: 10.0,
            l2: 50.0,
            max_sweeps: 30,
            tolerance: 1e-4,
            init_std: 0.01,
            seed: 0,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BmfTrained {
    pub model: BmfModel,
    /// Objective after initialization and after every half-sweep.
    pub objectives: Vec<f64>,
}

impl BmfModel {
    pub fn new(users: Matrix, items: Matrix, alpha: f64, l2: f64) -> Result<Self> {
        if users.cols() != items.cols() {
            return Err(Error::config("user and item factor dimensions differ"));
        }
        if !(alpha >= 0.0) || !(l2 >= 0.0) {
            return Err(Error::config("alpha and l2 must be non-negative"));
        }
        Ok(BmfModel { users, items, alpha, l2 })
    }

    pub fn users(&self) -> &Matrix {
        &self.users
    }

    pub fn items(&self) -> &Matrix {
        &self.items
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn l2(&self) -> f64 {
        self.l2
    }

    pub fn score(&self, user: UserId, item: ItemId) -> f64 {
        dot(self.users.row(user as usize), self.items.row(item as usize))
    }

    pub fn to_param_file(&self) -> ParamFile {
        let mut f = ParamFile::new("bmf");
        f.set_matrix("users", &self.users);
        f.set_matrix("items", &self.items);
        f.set_scalar("alpha", self.alpha);
        f.set_scalar("l2", self.l2);
        f
    }

    pub fn from_param_file(f: &ParamFile) -> Result<Self> {
        f.expect_kind("bmf")?;
        BmfModel::new(f.matrix("users")?, f.matrix("items")?, f.scalar("alpha")?, f.scalar("l2")?)
    }
}

impl Scorer for BmfModel {
    fn score_into(&self, user: UserId, items: &[ItemId], out: &mut Vec<f64>) {
        out.clear();
        out.extend(items.iter().map(|&i| self.score(user, i)));
    }
}

/// The weighted objective, using `Σ_{u,i} (U_u·V_i)² = ⟨UᵀU, VᵀV⟩` for the
/// dense part.
pub fn bmf_objective(model: &BmfModel, train: &ImplicitDataset) -> f64 {
    let gu = model.users.gram();
    let gv = model.items.gram();
    let mut total: f64 = gu.as_slice().iter().zip(gv.as_slice()).map(|(a, b)| a * b).sum();
    for u in 0..train.n_users() as UserId {
        for &i in train.user_items(u) {
            let x = model.score(u, i);
            total += (1.0 + model.alpha) * (1.0 - x) * (1.0 - x) - x * x;
        }
    }
    total + model.l2 * (model.users.squared_norm() + model.items.squared_norm())
}

fn solve_one(gram: &DMatrix<f64>, fixed: &Matrix, observed: &[u32], alpha: f64, l2: f64) -> Result<Vec<f64>> {
    let d = fixed.cols();
    let mut a = gram.clone();
    let mut rhs = DVector::zeros(d);
    for &j in observed {
        let y = fixed.row(j as usize);
        for r in 0..d {
            rhs[r] += (1.0 + alpha) * y[r];
            for c in 0..d {
                a[(r, c)] += alpha * y[r] * y[c];
            }
        }
    }
    for r in 0..d {
        a[(r, r)] += l2;
    }
    if let Some(ch) = a.clone().cholesky() {
        return Ok(ch.solve(&rhs).iter().copied().collect());
    }
    let bump = 1e-8 * (a.trace() / d as f64).abs().max(1.0);
    for r in 0..d {
        a[(r, r)] += bump;
    }
    match a.cholesky() {
        Some(ch) => {
            warn!("weighted normal equations needed a ridge bump of {bump:e}");
            Ok(ch.solve(&rhs).iter().copied().collect())
        }
        None => Err(Error::data("weighted normal equations are singular")),
    }
}

/// Exact least-squares update of every row given the other side's factors:
/// row `r` solves `(YᵀY + α Σ_{j ∈ S_r} y_j y_jᵀ + λI) x = (1 + α) Σ_{j ∈ S_r} y_j`
/// where `S_r = observed(r)`.
pub fn solve_rows<'a>(
    fixed: &Matrix,
    rows: usize,
    observed: impl Fn(usize) -> &'a [u32] + Sync,
    alpha: f64,
    l2: f64,
    threads: usize,
) -> Result<Matrix> {
    let d = fixed.cols();
    let g = fixed.gram();
    let gram = DMatrix::from_row_slice(d, d, g.as_slice());
    let solve = |r: usize| solve_one(&gram, fixed, observed(r), alpha, l2);
    let solved: Vec<Vec<f64>> = if threads <= 1 {
        (0..rows).map(solve).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?;
        pool.install(|| (0..rows).into_par_iter().map(solve).collect::<Result<_>>())?
    };
    Ok(Matrix::from_vec(rows, d, solved.into_iter().flatten().collect()))
}

/// Alternating least squares until the relative objective change of a full
/// sweep falls below `tolerance` or `max_sweeps` sweeps have run.
pub fn train_bmf(train: &ImplicitDataset, config: &BmfConfig) -> Result<BmfTrained> {
    let mut rng = rng_from_seed(config.seed);
    let users = Matrix::gaussian(train.n_users(), config.dim, config.init_std, &mut rng);
    let items = Matrix::gaussian(train.n_items(), config.dim, config.init_std, &mut rng);
    let mut model = BmfModel::new(users, items, config.alpha, config.l2)?;
    let mut objectives = vec![bmf_objective(&model, train)];
    for sweep in 0..config.max_sweeps {
        let before = *objectives.last().expect("initial objective");
        model.users = solve_rows(
            &model.items,
            train.n_users(),
            |u| train.user_items(u as UserId),
            config.alpha,
            config.l2,
            config.threads,
        )?;
        objectives.push(bmf_objective(&model, train));
        model.items = solve_rows(
            &model.users,
            train.n_items(),
            |i| train.item_users(i as ItemId),
            config.alpha,
            config.l2,
            config.threads,
        )?;
        let after = bmf_objective(&model, train);
        objectives.push(after);
        if !after.is_finite() {
            return Err(Error::divergence("bmf training", format!("non-finite objective in sweep {sweep}")));
        }
        if (before - after).abs() <= config.tolerance * before.abs() {
            break;
        }
    }
    Ok(BmfTrained { model, objectives })
}
