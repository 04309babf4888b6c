//! Evaluation reports, recommendations and artifact audits.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use cistree::cis::topk;
use cistree::dataset::ImplicitDataset;
use cistree::eval::{build_protocol_all_unobserved, build_protocol_explicit, evaluate, TSV_HEADER};
use cistree::itemtree::{deserialize_with_hash, validate};
use cistree::{Error, ItemId, Result};
use log::info;

use crate::artifacts::{hash_comment, in_file, load_model, read, tree_path, write_atomic, Model};
use crate::config::{ExperimentConfig, Protocol};
use crate::prep::{prepared, Prepared};
use crate::train::check_shape;

/// One row per (model, protocol) on the test split, as TSV with the hash
/// comment first. The report is also written to `<output_dir>/report.tsv`.
pub fn cmd_eval(cfg: &ExperimentConfig, models: &[PathBuf]) -> Result<String> {
    if models.is_empty() {
        return Err(Error::Config("eval needs at least one --model".into()));
    }
    let data = prepared(cfg)?;
    let loaded = models
        .iter()
        .map(|p| {
            let m = load_model(p)?;
            check_shape(&(m.model.n_users(), m.model.n_items()), &data)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = hash_comment(&cfg.hash());
    out.push_str(TSV_HEADER);
    out.push('\n');
    for protocol in &cfg.eval.protocols {
        let tasks = match protocol {
            Protocol::Explicit => build_protocol_explicit(&data.labels, &data.test),
            Protocol::AllUnobserved => build_protocol_all_unobserved(&data.train, &data.test),
        };
        info!("{}: {} tasks, {} users skipped", protocol.name(), tasks.tasks.len(), tasks.skipped);
        for m in &loaded {
            let report = evaluate(&m.model, &tasks, cfg.threads)?;
            out.push_str(&report.tsv_row(&m.name, protocol.name()));
            out.push('\n');
        }
    }
    write_atomic(&cfg.output_dir.join("report.tsv"), out.as_bytes())?;
    Ok(out)
}

/// Top-k items the user has not selected in training, as
/// `rank item score probability` rows. The probability column is empty for
/// models without one.
pub fn cmd_recommend(cfg: &ExperimentConfig, model: &Path, user: &str, k: usize) -> Result<String> {
    let data = prepared(cfg)?;
    let loaded = load_model(model)?;
    check_shape(&(loaded.model.n_users(), loaded.model.n_items()), &data)?;
    let u = data.users().index_of(user).ok_or_else(|| Error::Lookup(format!("unknown user `{user}`")))?;
    let candidates: Vec<ItemId> =
        (0..data.items().len() as ItemId).filter(|&i| !data.train.user_has_item(u, i)).collect();
    if candidates.is_empty() {
        return Err(Error::Data(format!("user `{user}` has no unobserved items")));
    }
    let mut out = hash_comment(&cfg.hash());
    out.push_str("rank\titem\tscore\tprobability\n");
    for (rank, (item, score)) in topk(&loaded.model, u, &candidates, k)?.into_iter().enumerate() {
        let prob = loaded.model.prob(u, item)?.map(|p| format!("{p:.17e}")).unwrap_or_default();
        out.push_str(&format!("{}\t{}\t{score:.17e}\t{prob}\n", rank + 1, data.items().id(item)));
    }
    Ok(out)
}

pub struct Audit {
    pub lines: Vec<String>,
    pub failures: usize,
}

impl Audit {
    fn check(&mut self, name: &str, problem: Option<String>) {
        match problem {
            None => self.lines.push(format!("ok\t{name}")),
            Some(p) => {
                self.failures += 1;
                self.lines.push(format!("FAIL\t{name}\t{p}"));
            }
        }
    }
}

fn count_problem(d: &ImplicitDataset) -> Option<String> {
    let total: u64 = d.item_counts().iter().sum();
    if total != d.len() as u64 {
        return Some(format!("item counts sum to {total}, {} pairs", d.len()));
    }
    let mut users: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); d.n_items()];
    for &(u, i) in d.pairs() {
        users[i as usize].insert(u);
    }
    (0..d.n_items() as ItemId)
        .find(|&i| d.item_users(i).iter().copied().collect::<BTreeSet<_>>() != users[i as usize])
        .map(|i| format!("user set of item {i} disagrees with the pairs"))
}

fn audit_data(data: &Prepared, audit: &mut Audit) {
    for (name, d) in [("train", &data.train), ("valid", &data.valid), ("test", &data.test)] {
        audit.check(&format!("{name} counts"), count_problem(d));
    }
    let mut seen = BTreeSet::new();
    let duplicate = [&data.train, &data.valid, &data.test]
        .iter()
        .flat_map(|d| d.pairs().iter())
        .find(|p| !seen.insert(**p))
        .map(|(u, i)| format!("pair ({u}, {i}) appears in more than one split"));
    audit.check("splits are disjoint", duplicate);
    audit.check(
        "labels are disjoint",
        (!data.labels.is_disjoint()).then(|| "an item is both relevant and not relevant".to_string()),
    );
}

/// Dataset audits, plus tree and shape checks for each model.
pub fn cmd_validate(cfg: &ExperimentConfig, models: &[PathBuf]) -> Result<Audit> {
    let data = prepared(cfg)?;
    let mut audit = Audit { lines: Vec::new(), failures: 0 };
    audit_data(&data, &mut audit);
    for path in models {
        let shown = path.display().to_string();
        let tpath = tree_path(path);
        if tpath.exists() {
            let (tree, _) = deserialize_with_hash(&read(&tpath)?).map_err(|e| in_file(e, &tpath))?;
            let violations = validate(&tree);
            let problem = (!violations.is_empty())
                .then(|| violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "));
            audit.check(&format!("{shown} tree"), problem);
        }
        let loaded = load_model(path)?;
        let shape = check_shape(&(loaded.model.n_users(), loaded.model.n_items()), &data).err();
        audit.check(&format!("{shown} shape"), shape.map(|e| e.to_string()));
        if let Model::Hier(m) = &loaded.model {
            let bad = (0..m.n_users().min(3) as u32).find_map(|u| {
                let total: f64 = m.tree().full_distribution(m.user(u)).iter().sum();
                ((total - 1.0).abs() > 1e-9).then(|| format!("user {u} probabilities sum to {total}"))
            });
            audit.check(&format!("{shown} normalization"), bad);
        }
    }
    Ok(audit)
}
