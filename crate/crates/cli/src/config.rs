//! Experiment configuration: one JSON document, defaults for every field,
//! and `--dotted.key=value` overrides.

use std::path::{Path, PathBuf};

use cistree::baselines::{BmfConfig, BprConfig};
use cistree::cis::{TrainConfig, DEFAULT_DIM};
use cistree::dataset::{RatingFormat, SplitFractions};
use cistree::pipeline::CisPipelineConfig;
use cistree::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub eval: EvalConfig,
    pub output_dir: PathBuf,
    /// Worker threads for evaluation, tree learning and ALS. Copied into the
    /// nested `threads` keys on resolution.
    pub threads: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            eval: EvalConfig::default(),
            output_dir: PathBuf::from("cistree-out"),
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub ratings: PathBuf,
    pub format: RatingFormat,
    pub positive_threshold: f64,
    pub relevant_threshold: f64,
    pub not_relevant_below: f64,
    pub split: SplitFractions,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            ratings: PathBuf::new(),
            format: RatingFormat::Ml10mDat,
            positive_threshold: 4.0,
            relevant_threshold: 4.0,
            not_relevant_below: 3.0,
            split: SplitFractions::default(),
            split_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    CisRandom,
    #[default]
    CisLearned,
    Flat,
    Bpr,
    Bmf,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::CisRandom => "cis-random",
            ModelKind::CisLearned => "cis-learned",
            ModelKind::Flat => "flat",
            ModelKind::Bpr => "bpr",
            ModelKind::Bmf => "bmf",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlatConfig {
    pub dim: usize,
    pub train: TrainConfig,
}

impl Default for FlatConfig {
    fn default() -> Self {
        FlatConfig { dim: DEFAULT_DIM, train: TrainConfig::default() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub cis: CisPipelineConfig,
    pub flat: FlatConfig,
    pub bpr: BprConfig,
    pub bmf: BmfConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// Explicitly labelled negatives.
    Explicit,
    /// Every unobserved item is a negative.
    AllUnobserved,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Explicit => "explicit",
            Protocol::AllUnobserved => "all-unobserved",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub protocols: Vec<Protocol>,
    /// Validation MAP (all-unobserved protocol) after every epoch.
    pub epoch_map: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { protocols: vec![Protocol::Explicit, Protocol::AllUnobserved], epoch_map: true }
    }
}

/// Keys left out of the config hash: they change where results go or how
/// fast they arrive, never what they are.
const UNHASHED: [&[&str]; 4] =
    [&["output_dir"], &["threads"], &["model", "cis", "tree", "threads"], &["model", "bmf", "threads"]];

impl ExperimentConfig {
    /// Reads `path` (if any), applies `overrides` in order, and resolves.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| with_path(e, p))?;
                let raw: Value = serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                let resolved = to_value(&from_value(raw.clone())?);
                check_known(&raw, &resolved, "")?;
                resolved
            }
            None => to_value(&ExperimentConfig::default()),
        };
        for (key, text) in overrides {
            set_path(&mut value, key, parse_value(text))?;
        }
        Ok(from_value(value)?.resolved())
    }

    fn resolved(mut self) -> Self {
        self.model.cis.tree.threads = self.threads;
        self.model.bmf.threads = self.threads;
        self
    }

    pub fn to_json(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("config serializes");
        out.push(b'\n');
        out
    }

    pub fn hash(&self) -> String {
        let mut value = to_value(self);
        for path in UNHASHED {
            remove_path(&mut value, path);
        }
        digest(&value)
    }

    /// Hash of the data section alone; prepared files are reused when it
    /// matches.
    pub fn data_key(&self) -> String {
        digest(&serde_json::to_value(&self.data).expect("data config serializes"))
    }

    pub fn data_dir(&self) -> PathBuf {
        self.output_dir.join("data")
    }
}

fn digest(value: &Value) -> String {
    let canonical = serde_json::to_vec(value).expect("value serializes");
    hex::encode(Sha256::digest(&canonical))
}

fn to_value(cfg: &ExperimentConfig) -> Value {
    serde_json::to_value(cfg).expect("config serializes")
}

fn from_value(value: Value) -> Result<ExperimentConfig> {
    serde_json::from_value(value).map_err(|e| Error::Config(format!("invalid config: {e}")))
}

pub fn with_path(e: std::io::Error, path: &Path) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

/// Every key present in `raw` must survive deserialization.
fn check_known(raw: &Value, resolved: &Value, prefix: &str) -> Result<()> {
    if let (Value::Object(raw), Value::Object(resolved)) = (raw, resolved) {
        for (key, sub) in raw {
            let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
            match resolved.get(key) {
                Some(res) => check_known(sub, res, &path)?,
                None => return Err(Error::Config(format!("unknown config key `{path}`"))),
            }
        }
    }
    Ok(())
}

/// JSON if it parses, otherwise a bare string.
fn parse_value(text: &str) -> Value {
    serde_json::from_str(text).unwrap_or_else(|_| Value::String(text.to_string()))
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let unknown = || Error::Config(format!("unknown config key `{key}`"));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (depth, part) in parts.iter().enumerate() {
        let map: &mut Map<String, Value> = node.as_object_mut().ok_or_else(unknown)?;
        let slot = map.get_mut(*part).ok_or_else(unknown)?;
        if depth + 1 == parts.len() {
            *slot = coerce(slot, value);
            return Ok(());
        }
        node = slot;
    }
    Err(unknown())
}

/// Keeps strings that happen to look like JSON (e.g. an all-digit path)
/// as strings when the slot holds a string.
fn coerce(slot: &Value, value: Value) -> Value {
    match (slot, &value) {
        (Value::String(_), Value::Number(_) | Value::Bool(_) | Value::Null) => Value::String(value.to_string()),
        _ => value,
    }
}

fn remove_path(root: &mut Value, path: &[&str]) {
    let Some((last, parents)) = path.split_last() else { return };
    let mut node = root;
    for part in parents {
        match node.get_mut(*part) {
            Some(next) => node = next,
            None => return,
        }
    }
    if let Some(map) = node.as_object_mut() {
        map.remove(*last);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn overrides(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults_round_trip_through_json() {
        let cfg = ExperimentConfig::default().resolved();
        let back: ExperimentConfig = serde_json::from_slice(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn dotted_overrides_reach_nested_fields() {
        let cfg = ExperimentConfig::load(
            None,
            &overrides(&[
                ("model.kind", "bpr"),
                ("model.cis.tree.arity", "3"),
                ("model.cis.tree.init", "random"),
                ("data.ratings", "123"),
                ("eval.protocols", "[\"explicit\"]"),
            ]),
        )
        .unwrap();
        assert_eq!(cfg.model.kind, ModelKind::Bpr);
        assert_eq!(cfg.model.cis.tree.arity, 3);
        assert_eq!(cfg.model.cis.tree.init, cistree::treelearn::InitMode::Random);
        assert_eq!(cfg.data.ratings, PathBuf::from("123"));
        assert_eq!(cfg.eval.protocols, vec![Protocol::Explicit]);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        for (k, v) in [("model.nope", "1"), ("model.kind", "svd"), ("threads", "-1"), ("data.ratings.x", "1")] {
            let err = ExperimentConfig::load(None, &overrides(&[(k, v)])).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{k}={v}: {err}");
        }
    }

    #[test]
    fn hash_ignores_location_and_threads_only() {
        let base = ExperimentConfig::load(None, &[]).unwrap();
        let moved =
            ExperimentConfig::load(None, &overrides(&[("output_dir", "elsewhere"), ("threads", "4")])).unwrap();
        assert_eq!(base.hash(), moved.hash());
        assert_eq!(moved.model.bmf.threads, 4);
        let changed = ExperimentConfig::load(None, &overrides(&[("model.cis.seed", "9")])).unwrap();
        assert_ne!(base.hash(), changed.hash());
        assert_eq!(base.data_key(), changed.data_key());
        assert_eq!(base.hash().len(), 64);
    }

    #[test]
    fn file_keys_are_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"data": {"ratings": "r.dat", "typo": 1}}"#).unwrap();
        assert!(matches!(ExperimentConfig::load(Some(&path), &[]), Err(Error::Config(_))));
        std::fs::write(&path, r#"{"data": {"ratings": "r.dat"}, "model": {"kind": "flat"}}"#).unwrap();
        let cfg = ExperimentConfig::load(Some(&path), &[]).unwrap();
        assert_eq!(cfg.data.ratings, PathBuf::from("r.dat"));
        assert_eq!(cfg.model.kind, ModelKind::Flat);
        assert_eq!(cfg.data.positive_threshold, 4.0);
    }
}
