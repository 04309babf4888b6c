//! Data preparation: ratings to implicit pairs, the three-way split and
//! relevance labels, written as TSV under `<output_dir>/data`.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use cistree::dataset::{build_relevance, ingest_ratings, split, to_implicit, IdMap, ImplicitDataset, RelevanceLabels};
use cistree::{Error, Result};
use log::info;
use serde::{Deserialize, Serialize};

use crate::artifacts::{in_file, open, read, stamped_tsv, write_atomic};
use crate::config::ExperimentConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepManifest {
    pub config_hash: String,
    pub data_key: String,
    pub ratings: usize,
    pub pairs: usize,
    pub users: usize,
    pub items: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub labelled_users: usize,
}

pub struct Prepared {
    pub train: ImplicitDataset,
    pub valid: ImplicitDataset,
    pub test: ImplicitDataset,
    pub labels: RelevanceLabels,
}

impl Prepared {
    pub fn users(&self) -> &Arc<IdMap> {
        self.train.users()
    }

    pub fn items(&self) -> &Arc<IdMap> {
        self.train.items()
    }
}

pub struct DataFiles {
    pub users: PathBuf,
    pub items: PathBuf,
    pub train: PathBuf,
    pub valid: PathBuf,
    pub test: PathBuf,
    pub labels: PathBuf,
    pub manifest: PathBuf,
}

impl DataFiles {
    pub fn in_dir(dir: &Path) -> Self {
        DataFiles {
            users: dir.join("users.tsv"),
            items: dir.join("items.tsv"),
            train: dir.join("train.tsv"),
            valid: dir.join("valid.tsv"),
            test: dir.join("test.tsv"),
            labels: dir.join("labels.tsv"),
            manifest: dir.join("prep.json"),
        }
    }

    fn all(&self) -> [&PathBuf; 7] {
        [&self.users, &self.items, &self.train, &self.valid, &self.test, &self.labels, &self.manifest]
    }
}

/// Runs the full preparation and writes every data file.
pub fn cmd_prep(cfg: &ExperimentConfig) -> Result<PrepManifest> {
    let data = &cfg.data;
    if data.ratings.as_os_str().is_empty() {
        return Err(Error::Config("data.ratings is not set".into()));
    }
    let ratings = ingest_ratings(open(&data.ratings)?, data.format).map_err(|e| in_file(e, &data.ratings))?;
    let implicit = to_implicit(&ratings, data.positive_threshold)?;
    let parts = split(&implicit, data.split, data.split_seed)?;
    let labels = build_relevance(&ratings, data.relevant_threshold, data.not_relevant_below)?;

    let hash = cfg.hash();
    let files = DataFiles::in_dir(&cfg.data_dir());
    write_atomic(&files.users, &stamped_tsv(&hash, |w| implicit.users().write_tsv(w))?)?;
    write_atomic(&files.items, &stamped_tsv(&hash, |w| implicit.items().write_tsv(w))?)?;
    write_atomic(&files.train, &stamped_tsv(&hash, |w| parts.train.write_pairs(w))?)?;
    write_atomic(&files.valid, &stamped_tsv(&hash, |w| parts.valid.write_pairs(w))?)?;
    write_atomic(&files.test, &stamped_tsv(&hash, |w| parts.test.write_pairs(w))?)?;
    write_atomic(&files.labels, &stamped_tsv(&hash, |w| labels.write_tsv(w))?)?;

    let manifest = PrepManifest {
        config_hash: hash,
        data_key: cfg.data_key(),
        ratings: ratings.len(),
        pairs: implicit.len(),
        users: implicit.n_users(),
        items: implicit.n_items(),
        train: parts.train.len(),
        valid: parts.valid.len(),
        test: parts.test.len(),
        labelled_users: labels.len(),
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    bytes.push(b'\n');
    write_atomic(&files.manifest, &bytes)?;
    info!(
        "prepared {} ratings into {} pairs ({} users, {} items): train {}, valid {}, test {}",
        manifest.ratings, manifest.pairs, manifest.users, manifest.items, manifest.train, manifest.valid, manifest.test
    );
    Ok(manifest)
}

fn manifest_matches(files: &DataFiles, key: &str) -> bool {
    if !files.all().iter().all(|p| p.exists()) {
        return false;
    }
    read(&files.manifest)
        .ok()
        .and_then(|b| serde_json::from_slice::<PrepManifest>(&b).ok())
        .is_some_and(|m| m.data_key == key)
}

/// Prepared data for `cfg`, reusing existing files when their data key
/// matches and running preparation otherwise.
pub fn prepared(cfg: &ExperimentConfig) -> Result<Prepared> {
    let files = DataFiles::in_dir(&cfg.data_dir());
    if manifest_matches(&files, &cfg.data_key()) {
        info!("reusing prepared data in {}", cfg.data_dir().display());
    } else {
        cmd_prep(cfg)?;
    }
    load(&files)
}

pub fn load(files: &DataFiles) -> Result<Prepared> {
    let users = Arc::new(IdMap::read_tsv(open(&files.users)?).map_err(|e| in_file(e, &files.users))?);
    let items = Arc::new(IdMap::read_tsv(open(&files.items)?).map_err(|e| in_file(e, &files.items))?);
    let pairs = |path: &Path| {
        ImplicitDataset::read_pairs(open(path)?, users.clone(), items.clone()).map_err(|e| in_file(e, path))
    };
    Ok(Prepared {
        train: pairs(&files.train)?,
        valid: pairs(&files.valid)?,
        test: pairs(&files.test)?,
        labels: RelevanceLabels::read_tsv(open(&files.labels)?).map_err(|e| in_file(e, &files.labels))?,
    })
}
