//! Tree-structured CIS training pipelines: a random balanced tree trained
//! once, and the three-stage learned-tree variant built on top of it.

use serde::{Deserialize, Serialize};

use crate::cis::{finetune, train_hier_observed, EpochLog, HierModel, TrainConfig, Trained, DEFAULT_DIM};
use crate::dataset::ImplicitDataset;
use crate::itemtree::ItemTree;
use crate::linalg::{derive_seed, Matrix};
use crate::treelearn::{learn_tree, LevelProgress, TreeLearnConfig};
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CisPipelineConfig {
    pub dim: usize,
    /// Arity of the random balanced tree.
    pub random_arity: usize,
    /// Master seed; every stage seed is derived from it.
    pub seed: u64,
    pub stage1: TrainConfig,
    pub tree: TreeLearnConfig,
    pub finetune: TrainConfig,
}

impl Default for CisPipelineConfig {
    fn default() -> Self {
        CisPipelineConfig {
            dim: DEFAULT_DIM,
            random_arity: 2,
            seed: 0,
            stage1: TrainConfig::default(),
            tree: TreeLearnConfig::default(),
            finetune: TrainConfig::default(),
        }
    }
}

impl CisPipelineConfig {
    pub fn tree_seed(&self) -> u64 {
        derive_seed(self.seed, 1)
    }

    pub fn user_seed(&self) -> u64 {
        derive_seed(self.seed, 2)
    }

    pub fn stage1_config(&self) -> TrainConfig {
        TrainConfig { seed: derive_seed(self.seed, 3), freeze_users: false, ..self.stage1.clone() }
    }

    pub fn tree_config(&self) -> TreeLearnConfig {
        TreeLearnConfig { seed: derive_seed(self.seed, 4), ..self.tree.clone() }
    }

    pub fn finetune_config(&self) -> TrainConfig {
        TrainConfig { seed: derive_seed(self.seed, 5), ..self.finetune.clone() }
    }
}

/// Untrained model on a random balanced tree with popularity biases.
pub fn init_random_tree_model(train: &ImplicitDataset, config: &CisPipelineConfig) -> Result<HierModel> {
    let tree = ItemTree::random_balanced(train.n_items(), config.random_arity, config.dim, config.tree_seed())?;
    let mut model = HierModel::init(train.n_users(), tree, config.user_seed())?;
    model.set_popularity_biases(train.item_counts());
    Ok(model)
}

/// Stage 1: CIS on a random balanced tree. This is also the CIS-Random model.
pub fn train_cis_random(
    train: &ImplicitDataset,
    config: &CisPipelineConfig,
    observer: &mut dyn FnMut(&EpochLog, &HierModel),
) -> Result<Trained<HierModel>> {
    let model = init_random_tree_model(train, config)?;
    train_hier_observed(model, train, &config.stage1_config(), observer)
}

#[derive(Debug, Clone)]
pub struct LearnedCis {
    pub model: HierModel,
    pub stage1: Vec<EpochLog>,
    pub levels: Vec<LevelProgress>,
    pub finetune: Vec<EpochLog>,
}

/// Stage 3: finetune all parameters of a learned tree starting from the
/// stage-1 user factors.
pub fn finetune_learned(
    users: Matrix,
    tree: ItemTree,
    train: &ImplicitDataset,
    config: &CisPipelineConfig,
    observer: &mut dyn FnMut(&EpochLog, &HierModel),
) -> Result<Trained<HierModel>> {
    let model = HierModel::new(users, tree)?;
    finetune(model, train, &config.finetune_config(), observer)
}

/// All three stages without checkpointing. `valid` is used only for the
/// tree learner's per-level model selection and monitoring.
pub fn train_cis_learned(
    train: &ImplicitDataset,
    valid: Option<&ImplicitDataset>,
    config: &CisPipelineConfig,
) -> Result<LearnedCis> {
    let stage1 = train_cis_random(train, config, &mut |_, _| {})?;
    let (users, _) = stage1.model.into_parts();
    let learned = learn_tree(train, &users, valid, &config.tree_config())?;
    let tuned = finetune_learned(users, learned.tree, train, config, &mut |_, _| {})?;
    Ok(LearnedCis { model: tuned.model, stage1: stage1.epochs, levels: learned.progress, finetune: tuned.epochs })
}
