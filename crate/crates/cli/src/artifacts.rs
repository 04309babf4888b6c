//! Reading and writing run artifacts. Every file written here carries the
//! config hash of the run that produced it.

use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use cistree::baselines::{BmfModel, BprModel};
use cistree::cis::{flat_prob, FlatModel, HierModel};
use cistree::eval::Scorer;
use cistree::itemtree::{deserialize_with_hash, serialize_with_hash};
use cistree::params::ParamFile;
use cistree::{Error, ItemId, Result, UserId};
use serde::{Deserialize, Serialize};

use crate::config::{with_path, ModelKind};

/// Writes through a temporary sibling and renames, so an interrupted run
/// never leaves a truncated file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| with_path(e, dir))?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(|e| with_path(e, &tmp))?;
    fs::rename(&tmp, path).map_err(|e| with_path(e, path))
}

pub fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| with_path(e, path))
}

pub fn open(path: &Path) -> Result<BufReader<fs::File>> {
    Ok(BufReader::new(fs::File::open(path).map_err(|e| with_path(e, path))?))
}

pub fn hash_comment(hash: &str) -> String {
    format!("# config_hash\t{hash}\n")
}

/// A TSV body preceded by the hash comment line.
pub fn stamped_tsv(hash: &str, write: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut out = hash_comment(hash).into_bytes();
    write(&mut out)?;
    Ok(out)
}

/// JSON wrapper for payloads that have no hash field of their own.
#[derive(Debug, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub config_hash: String,
    pub payload: T,
}

impl<T: Serialize> Stamped<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec(self).expect("stamped payload serializes");
        out.push(b'\n');
        out
    }
}

pub fn read_stamped<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Stamped<T>> {
    serde_json::from_slice(&read(path)?)
        .map_err(|e| Error::Format { offset: 0, message: format!("{}: {e}", path.display()) })
}

/// Line-delimited JSON records, each carrying the hash.
pub fn jsonl(hash: &str, records: &[serde_json::Value]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        let mut r = r.clone();
        if let Some(map) = r.as_object_mut() {
            map.insert("config_hash".into(), hash.into());
        }
        serde_json::to_writer(&mut out, &r).expect("record serializes");
        out.push(b'\n');
    }
    out
}

/// Emits one progress record on standard output.
pub fn progress(record: serde_json::Value) {
    let mut stdout = std::io::stdout().lock();
    let _ = serde_json::to_writer(&mut stdout, &record);
    let _ = stdout.write_all(b"\n");
    let _ = stdout.flush();
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub kind: ModelKind,
    pub config_hash: String,
    pub users: usize,
    pub items: usize,
}

pub enum Model {
    Hier(HierModel),
    Flat(FlatModel),
    Bpr(BprModel),
    Bmf(BmfModel),
}

impl Model {
    pub fn n_users(&self) -> usize {
        match self {
            Model::Hier(m) => m.n_users(),
            Model::Flat(m) => m.n_users(),
            Model::Bpr(m) => m.users().rows(),
            Model::Bmf(m) => m.users().rows(),
        }
    }

    pub fn n_items(&self) -> usize {
        match self {
            Model::Hier(m) => m.tree().item_count(),
            Model::Flat(m) => m.n_items(),
            Model::Bpr(m) => m.items().rows(),
            Model::Bmf(m) => m.items().rows(),
        }
    }

    /// `P(i|u)` for the probabilistic models.
    pub fn prob(&self, user: UserId, item: ItemId) -> Result<Option<f64>> {
        match self {
            Model::Hier(m) => m.item_prob(user, item).map(Some),
            Model::Flat(m) => flat_prob(m, user, item).map(Some),
            Model::Bpr(_) | Model::Bmf(_) => Ok(None),
        }
    }

    fn param_file(&self) -> ParamFile {
        match self {
            Model::Hier(m) => m.users_param_file(),
            Model::Flat(m) => m.to_param_file(),
            Model::Bpr(m) => m.to_param_file(),
            Model::Bmf(m) => m.to_param_file(),
        }
    }
}

impl Scorer for Model {
    fn score_into(&self, user: UserId, items: &[ItemId], out: &mut Vec<f64>) {
        match self {
            Model::Hier(m) => m.score_into(user, items, out),
            Model::Flat(m) => m.score_into(user, items, out),
            Model::Bpr(m) => m.score_into(user, items, out),
            Model::Bmf(m) => m.score_into(user, items, out),
        }
    }
}

pub fn tree_path(params: &Path) -> PathBuf {
    params.with_extension("tree")
}

pub fn meta_path(params: &Path) -> PathBuf {
    params.with_extension("meta.json")
}

/// Writes `<path>` (parameters), `<path>.tree` for tree models and the
/// metadata sidecar.
pub fn save_model(path: &Path, model: &Model, kind: ModelKind, hash: &str) -> Result<()> {
    let mut params = model.param_file();
    params.config_hash = Some(hash.to_string());
    if let Model::Hier(m) = model {
        write_atomic(&tree_path(path), &serialize_with_hash(m.tree(), Some(hash)))?;
    }
    write_atomic(path, &params.to_bytes())?;
    let meta = ModelMeta { kind, config_hash: hash.into(), users: model.n_users(), items: model.n_items() };
    let mut bytes = serde_json::to_vec_pretty(&meta).expect("meta serializes");
    bytes.push(b'\n');
    write_atomic(&meta_path(path), &bytes)
}

pub struct LoadedModel {
    pub model: Model,
    /// Kind from the sidecar, or the parameter file's kind tag.
    pub name: String,
    pub config_hash: Option<String>,
}

pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let params = ParamFile::from_bytes(&read(path)?).map_err(|e| in_file(e, path))?;
    let model = match params.kind.as_str() {
        "hier-users" => {
            let tpath = tree_path(path);
            let (tree, _) = deserialize_with_hash(&read(&tpath)?).map_err(|e| in_file(e, &tpath))?;
            Model::Hier(HierModel::from_files(&params, tree).map_err(|e| in_file(e, path))?)
        }
        "flat" => Model::Flat(FlatModel::from_param_file(&params)?),
        "bpr" => Model::Bpr(BprModel::from_param_file(&params)?),
        "bmf" => Model::Bmf(BmfModel::from_param_file(&params)?),
        other => return Err(Error::Config(format!("{}: unsupported model kind `{other}`", path.display()))),
    };
    let mpath = meta_path(path);
    let name = if mpath.exists() {
        let meta: ModelMeta = serde_json::from_slice(&read(&mpath)?)
            .map_err(|e| Error::Format { offset: 0, message: format!("{}: {e}", mpath.display()) })?;
        meta.kind.name().to_string()
    } else {
        params.kind.clone()
    };
    Ok(LoadedModel { model, name, config_hash: params.config_hash })
}

/// Adds the file name to errors that lack it.
pub fn in_file(e: Error, path: &Path) -> Error {
    match e {
        Error::Parse { line, message } => Error::Parse { line, message: format!("{}: {message}", path.display()) },
        Error::Format { offset, message } => Error::Format { offset, message: format!("{}: {message}", path.display()) },
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    }
}
