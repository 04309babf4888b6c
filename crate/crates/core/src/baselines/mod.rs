//! Comparison models: pairwise-ranking BPR and confidence-weighted ALS
//! factorization of the binary selection matrix.

mod bmf;
mod bpr;

pub use bmf::{bmf_objective, solve_rows, train_bmf, BmfConfig, BmfModel, BmfTrained};
pub use bpr::{bpr_gradient, bpr_step, train_bpr, train_bpr_from, BprConfig, BprGradient, BprModel, Triple, TripleSampler};
