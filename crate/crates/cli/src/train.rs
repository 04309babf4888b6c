//! Model training with per-stage and per-tree-level checkpoints.
//!
//! Checkpoints live in `<output_dir>/checkpoints` and are only reused when
//! their embedded config hash matches the current run. Setting
//! `CISTREE_HALT_AFTER` to `stage1` or `level:<n>` stops the process with
//! exit code [`HALT_EXIT`] right after that checkpoint is written.

use std::path::{Path, PathBuf};

use cistree::baselines::{train_bmf, train_bpr, BprConfig};
use cistree::cis::{hier_loglik, train_flat_from, EpochLog, FlatModel, HierModel};
use cistree::eval::{build_protocol_all_unobserved, build_protocol_explicit, evaluate, MetricReport, Scorer, TaskSet};
use cistree::linalg::Matrix;
use cistree::pipeline::{finetune_learned, train_cis_random};
use cistree::treelearn::{TreeCheckpoint, TreeLearner};
use cistree::{Error, Result};
use log::{info, warn};
use serde_json::{json, Value};

use crate::artifacts::{
    jsonl, load_model, progress, read, read_stamped, save_model, write_atomic, Model, Stamped,
};
use crate::config::{ExperimentConfig, ModelKind};
use crate::prep::{prepared, Prepared};

pub const HALT_EXIT: i32 = 75;
const HALT_ENV: &str = "CISTREE_HALT_AFTER";

pub fn model_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("model.params")
}

pub fn metrics_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("metrics.jsonl")
}

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    hash: String,
    data: &'a Prepared,
    valid_tasks: TaskSet,
    /// Metric lines in emission order.
    metrics: Vec<u8>,
}

impl<'a> Run<'a> {
    fn new(cfg: &'a ExperimentConfig, data: &'a Prepared) -> Self {
        Run {
            cfg,
            hash: cfg.hash(),
            data,
            valid_tasks: build_protocol_all_unobserved(&data.train, &data.valid),
            metrics: Vec::new(),
        }
    }

    fn checkpoint(&self, name: &str) -> PathBuf {
        self.cfg.output_dir.join("checkpoints").join(name)
    }

    fn emit(&mut self, record: Value) {
        progress(record.clone());
        self.metrics.extend(jsonl(&self.hash, &[record]));
    }

    fn valid_map<S: Scorer + ?Sized>(&self, model: &S) -> Result<Option<f64>> {
        if !self.cfg.eval.epoch_map || self.valid_tasks.tasks.is_empty() {
            return Ok(None);
        }
        Ok(Some(evaluate(model, &self.valid_tasks, self.cfg.threads)?.map))
    }

    fn epoch_record(&self, stage: &str, log: &EpochLog, valid_loglik: Result<f64>, valid_map: Result<Option<f64>>) -> Value {
        json!({
            "event": "epoch",
            "stage": stage,
            "epoch": log.epoch,
            "learning_rate": log.learning_rate,
            "train_loglik": log.train_loglik,
            "valid_loglik": valid_loglik.ok(),
            "valid_map": valid_map.ok().flatten(),
        })
    }

    /// Trains a tree model, recording one metric line per epoch.
    fn hier_stage(
        &mut self,
        stage: &str,
        train: impl FnOnce(&mut dyn FnMut(&EpochLog, &HierModel)) -> Result<HierModel>,
    ) -> Result<HierModel> {
        let mut records = Vec::new();
        let model = train(&mut |log, m| {
            let record =
                self.epoch_record(stage, log, hier_loglik(m, self.data.valid.pairs()), self.valid_map(m));
            progress(record.clone());
            records.push(record);
        })
        .map_err(|e| at_stage(e, stage))?;
        self.metrics.extend(jsonl(&self.hash, &records));
        Ok(model)
    }

    /// Stage 1, loaded from its checkpoint when possible.
    fn stage1(&mut self) -> Result<HierModel> {
        let params = self.checkpoint("stage1.params");
        let lines = self.checkpoint("stage1.jsonl");
        if let Some(model) = self.resume_model(&params) {
            info!("resuming after stage 1 from {}", params.display());
            self.metrics.extend(read(&lines)?);
            return Ok(model);
        }
        let start = self.metrics.len();
        let (cfg, data): (&'a ExperimentConfig, &'a Prepared) = (self.cfg, self.data);
        let model =
            self.hier_stage("stage1", |obs| Ok(train_cis_random(&data.train, &cfg.model.cis, obs)?.model))?;
        let wrapped = Model::Hier(model);
        write_atomic(&lines, &self.metrics[start..])?;
        save_model(&params, &wrapped, ModelKind::CisRandom, &self.hash)?;
        halt_if("stage1");
        let Model::Hier(model) = wrapped else { unreachable!() };
        Ok(model)
    }

    fn resume_model(&self, params: &Path) -> Option<HierModel> {
        if !params.exists() {
            return None;
        }
        match load_model(params) {
            Ok(loaded) if loaded.config_hash.as_deref() == Some(self.hash.as_str()) => match loaded.model {
                Model::Hier(m) => Some(m),
                _ => None,
            },
            Ok(_) => {
                warn!("ignoring {}: written by a different config", params.display());
                None
            }
            Err(e) => {
                warn!("ignoring unreadable checkpoint {}: {e}", params.display());
                None
            }
        }
    }

    /// Stages 2 and 3 from fixed user factors.
    fn learned(&mut self, users: Matrix) -> Result<HierModel> {
        let (cfg, data): (&'a ExperimentConfig, &'a Prepared) = (self.cfg, self.data);
        let cis = &cfg.model.cis;
        let learner = TreeLearner::new(&data.train, &users, Some(&data.valid), cis.tree_config())
            .map_err(|e| at_stage(e, "tree learning"))?;
        let path = self.checkpoint("tree.json");
        let mut cp = match read_stamped::<TreeCheckpoint>(&path) {
            Ok(s) if s.config_hash == self.hash && learner.check(&s.payload).is_ok() => {
                info!("resuming tree learning after level {}", s.payload.levels_done());
                s.payload
            }
            _ => learner.start(),
        };
        for p in &cp.progress {
            progress(level_record(p));
        }
        while !cp.is_done() {
            learner.step(&mut cp).map_err(|e| at_stage(e, "tree learning"))?;
            let stamped = Stamped { config_hash: self.hash.clone(), payload: cp };
            write_atomic(&path, &stamped.to_bytes())?;
            cp = stamped.payload;
            progress(level_record(cp.progress.last().expect("level recorded")));
            halt_if(&format!("level:{}", cp.levels_done()));
        }
        let levels: Vec<Value> = cp.progress.iter().map(level_record).collect();
        self.metrics.extend(jsonl(&self.hash, &levels));
        let tree = learner.finish(&cp).map_err(|e| at_stage(e, "tree learning"))?.tree;
        self.hier_stage("finetune", |obs| Ok(finetune_learned(users, tree, &data.train, cis, obs)?.model))
    }

    fn flat(&mut self) -> Result<FlatModel> {
        let (cfg, data): (&'a ExperimentConfig, &'a Prepared) = (self.cfg, self.data);
        let (fc, train) = (&cfg.model.flat, &data.train);
        let init = FlatModel::init(train.n_users(), train.item_counts(), fc.dim, fc.train.seed);
        let mut records = Vec::new();
        let trained = train_flat_from(init, train, &fc.train, &mut |log, m| {
            let record = self.epoch_record("flat", log, m.log_likelihood(data.valid.pairs()), self.valid_map(m));
            progress(record.clone());
            records.push(record);
        })
        .map_err(|e| at_stage(e, "flat"))?;
        self.metrics.extend(jsonl(&self.hash, &records));
        Ok(trained.model)
    }

    fn bpr(&mut self) -> Result<Model> {
        let train = &self.data.train;
        let per_epoch = train.len().max(1);
        let config = BprConfig {
            report_every: if self.cfg.model.bpr.report_every == 0 { per_epoch } else { self.cfg.model.bpr.report_every },
            ..self.cfg.model.bpr.clone()
        };
        let mut records = Vec::new();
        let model = train_bpr(train, &config, &mut |steps, m| {
            let record = json!({
                "event": "epoch",
                "stage": "bpr",
                "triples": steps,
                "epoch": steps as f64 / per_epoch as f64,
                "valid_map": self.valid_map(m).ok().flatten(),
            });
            progress(record.clone());
            records.push(record);
        })
        .map_err(|e| at_stage(e, "bpr"))?;
        self.metrics.extend(jsonl(&self.hash, &records));
        Ok(Model::Bpr(model))
    }

    fn bmf(&mut self) -> Result<Model> {
        let trained = train_bmf(&self.data.train, &self.cfg.model.bmf).map_err(|e| at_stage(e, "bmf"))?;
        let mut records: Vec<Value> = trained
            .objectives
            .iter()
            .enumerate()
            .map(|(half, obj)| json!({ "event": "sweep", "stage": "bmf", "half_sweep": half, "objective": obj }))
            .collect();
        records.push(json!({ "event": "epoch", "stage": "bmf", "valid_map": self.valid_map(&trained.model)? }));
        for r in &records {
            self.emit(r.clone());
        }
        Ok(Model::Bmf(trained.model))
    }

    /// Validation scores under both protocols, appended to the metrics.
    fn summary(&mut self, model: &Model, kind: ModelKind) -> Result<Vec<(String, MetricReport)>> {
        let explicit = build_protocol_explicit(&self.data.labels, &self.data.valid);
        let mut out = Vec::new();
        for (name, tasks) in [("explicit", &explicit), ("all-unobserved", &self.valid_tasks)] {
            if !tasks.tasks.is_empty() {
                out.push((name.to_string(), evaluate(model, tasks, self.cfg.threads)?));
            }
        }
        for (name, report) in &out {
            self.emit(json!({ "event": "validation", "model": kind.name(), "protocol": name, "report": report }));
        }
        Ok(out)
    }

    fn finish(mut self, model: Model, kind: ModelKind) -> Result<PathBuf> {
        let reports = self.summary(&model, kind)?;
        let path = model_path(self.cfg);
        save_model(&path, &model, kind, &self.hash)?;
        write_atomic(&metrics_path(self.cfg), &self.metrics)?;
        for (protocol, r) in reports {
            info!("validation {protocol}: {}", r.tsv_row(kind.name(), &protocol));
        }
        info!("wrote {}", path.display());
        progress(json!({ "event": "done", "model": path, "config_hash": self.hash }));
        Ok(path)
    }
}

fn level_record(p: &cistree::treelearn::LevelProgress) -> Value {
    let mut v = serde_json::to_value(p).expect("progress serializes");
    let map = v.as_object_mut().expect("object");
    map.insert("event".into(), "level".into());
    map.insert("stage".into(), "tree".into());
    v
}

fn at_stage(e: Error, stage: &str) -> Error {
    match e {
        Error::Divergence { stage: inner, message } => {
            Error::Divergence { stage: format!("{stage} ({inner})"), message }
        }
        other => other,
    }
}

fn halt_if(point: &str) {
    if std::env::var(HALT_ENV).is_ok_and(|v| v == point) {
        warn!("halting after {point} as requested by {HALT_ENV}");
        std::process::exit(HALT_EXIT);
    }
}

fn write_config(cfg: &ExperimentConfig) -> Result<()> {
    write_atomic(&cfg.output_dir.join("config.json"), &cfg.to_json())
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<PathBuf> {
    write_config(cfg)?;
    let data = prepared(cfg)?;
    let mut run = Run::new(cfg, &data);
    let kind = cfg.model.kind;
    let model = match kind {
        ModelKind::CisRandom => Model::Hier(run.stage1()?),
        ModelKind::CisLearned => {
            let (users, _) = run.stage1()?.into_parts();
            Model::Hier(run.learned(users)?)
        }
        ModelKind::Flat => Model::Flat(run.flat()?),
        ModelKind::Bpr => run.bpr()?,
        ModelKind::Bmf => run.bmf()?,
    };
    run.finish(model, kind)
}

/// Tree learning and finetuning from the user factors of a trained
/// tree model.
pub fn cmd_learn_tree(cfg: &ExperimentConfig, source: &Path) -> Result<PathBuf> {
    write_config(cfg)?;
    let data = prepared(cfg)?;
    let loaded = load_model(source)?;
    let Model::Hier(model) = loaded.model else {
        return Err(Error::Config(format!("{}: learn-tree needs a tree model", source.display())));
    };
    check_shape(&(model.n_users(), model.tree().item_count()), &data)?;
    let mut run = Run::new(cfg, &data);
    let (users, _) = model.into_parts();
    let learned = run.learned(users)?;
    run.finish(Model::Hier(learned), ModelKind::CisLearned)
}

pub fn check_shape(shape: &(usize, usize), data: &Prepared) -> Result<()> {
    let expected = (data.users().len(), data.items().len());
    if *shape != expected {
        return Err(Error::Config(format!(
            "model covers {}x{} users x items but the data has {}x{}",
            shape.0, shape.1, expected.0, expected.1
        )));
    }
    Ok(())
}
