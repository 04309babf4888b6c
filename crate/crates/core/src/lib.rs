//! Collaborative item selection (CIS) models for implicit feedback.
//!
//! Each user's selections are modelled as IID draws from a user-specific
//! distribution over the inventory, either as a flat softmax or as a
//! tree-structured product of per-node softmaxes. The crate also contains the
//! model-based top-down tree learner, BPR and weighted-ALS baselines, and both
//! ranking evaluation protocols (explicitly labelled negatives vs. all
//! unobserved items).

pub mod baselines;
pub mod cis;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod itemtree;
pub mod linalg;
pub mod params;
pub mod pipeline;
pub mod treelearn;

pub use error::{Error, Result};

/// Dense user index.
pub type UserId = u32;
/// Dense item index.
pub type ItemId = u32;
