//! Ranking tasks, the two evaluation protocols and the reported metrics.
//!
//! Protocol A ranks only items whose relevance is known from explicit
//! ratings. Protocol B treats every item the user did not select in training
//! as a candidate and only the user's held-out selections as relevant.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{ImplicitDataset, RelevanceLabels};
use crate::{Error, ItemId, Result, UserId};

/// Anything that assigns a real preference score to (user, item).
pub trait Scorer: Sync {
    /// Scores `items` for `user` into `out`, replacing its contents.
    fn score_into(&self, user: UserId, items: &[ItemId], out: &mut Vec<f64>);
}

/// Sorts candidates by descending score, ties by ascending item index.
pub fn rank_candidates<S: Scorer + ?Sized>(
    scorer: &S,
    user: UserId,
    candidates: &[ItemId],
) -> Result<Vec<(ItemId, f64)>> {
    let mut scores = Vec::with_capacity(candidates.len());
    scorer.score_into(user, candidates, &mut scores);
    let mut ranked: Vec<(ItemId, f64)> = candidates.iter().copied().zip(scores).collect();
    if let Some(&(item, s)) = ranked.iter().find(|(_, s)| !s.is_finite()) {
        return Err(Error::data(format!("non-finite score {s} for user {user}, item {item}")));
    }
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(ranked)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankingTask {
    pub user: UserId,
    pub candidates: Vec<ItemId>,
    /// Sorted subset of `candidates`.
    pub relevant: Vec<ItemId>,
}

impl RankingTask {
    pub fn is_relevant(&self, item: ItemId) -> bool {
        self.relevant.binary_search(&item).is_ok()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskSet {
    pub tasks: Vec<RankingTask>,
    /// Users with held-out data who could not form a task.
    pub skipped: usize,
}

/// Protocol A. Candidates are the user's test selections that are labelled
/// relevant plus every item labelled not relevant. Labelled items outside
/// the dataset's index space cannot be scored and are dropped.
pub fn build_protocol_explicit(labels: &RelevanceLabels, test: &ImplicitDataset) -> TaskSet {
    let mut set = TaskSet::default();
    for user in test.active_users() {
        let Some(user_labels) = labels.get(test.users().id(user)) else {
            set.skipped += 1;
            continue;
        };
        let mut relevant: Vec<ItemId> = test
            .user_items(user)
            .iter()
            .copied()
            .filter(|&i| user_labels.relevant.contains(test.items().id(i)))
            .collect();
        relevant.sort_unstable();
        let negatives: Vec<ItemId> =
            user_labels.not_relevant.iter().filter_map(|id| test.items().index_of(id)).collect();
        if relevant.is_empty() || negatives.is_empty() {
            set.skipped += 1;
            continue;
        }
        let mut candidates = relevant.clone();
        candidates.extend(negatives);
        candidates.sort_unstable();
        candidates.dedup();
        set.tasks.push(RankingTask { user, candidates, relevant });
    }
    set
}

/// Protocol B. Candidates are all items minus the user's training items;
/// relevant items are the user's test items not seen in training.
pub fn build_protocol_all_unobserved(train: &ImplicitDataset, test: &ImplicitDataset) -> TaskSet {
    let mut set = TaskSet::default();
    let n_items = train.n_items().max(test.n_items()) as ItemId;
    for user in test.active_users() {
        let relevant: Vec<ItemId> = test
            .user_items(user)
            .iter()
            .copied()
            .filter(|&i| (user as usize) >= train.n_users() || !train.user_has_item(user, i))
            .collect();
        if relevant.is_empty() {
            set.skipped += 1;
            continue;
        }
        let candidates: Vec<ItemId> = (0..n_items)
            .filter(|&i| (user as usize) >= train.n_users() || !train.user_has_item(user, i))
            .collect();
        set.tasks.push(RankingTask { user, candidates, relevant });
    }
    set
}

fn check_hits(hits: &[bool]) -> Result<usize> {
    let n = hits.iter().filter(|&&h| h).count();
    if n == 0 {
        return Err(Error::contract("ranking has no relevant items"));
    }
    Ok(n)
}

/// `hits[r]` marks whether the item at rank `r + 1` is relevant.
pub fn average_precision(hits: &[bool]) -> Result<f64> {
    let n_rel = check_hits(hits)?;
    let mut seen = 0usize;
    let mut total = 0.0;
    for (r, _) in hits.iter().enumerate().filter(|(_, &h)| h) {
        seen += 1;
        total += seen as f64 / (r + 1) as f64;
    }
    Ok(total / n_rel as f64)
}

/// Mean of `(rank - 1) / (n - 1)` over relevant items; 0 is best. A
/// single-item ranking scores 0.
pub fn epr(hits: &[bool]) -> Result<f64> {
    let n_rel = check_hits(hits)?;
    if hits.len() == 1 {
        return Ok(0.0);
    }
    let denom = (hits.len() - 1) as f64;
    let total: f64 = hits.iter().enumerate().filter(|(_, &h)| h).map(|(r, _)| r as f64 / denom).sum();
    Ok(total / n_rel as f64)
}

fn top_hits(hits: &[bool], k: usize) -> Result<usize> {
    if k == 0 {
        return Err(Error::contract("k must be at least 1"));
    }
    Ok(hits.iter().take(k).filter(|&&h| h).count())
}

pub fn precision_at_k(hits: &[bool], k: usize) -> Result<f64> {
    let top = top_hits(hits, k)?;
    let shown = k.min(hits.len());
    Ok(if shown == 0 { 0.0 } else { top as f64 / shown as f64 })
}

pub fn recall_at_k(hits: &[bool], k: usize) -> Result<f64> {
    let top = top_hits(hits, k)?;
    Ok(top as f64 / check_hits(hits)? as f64)
}

/// Cutoffs reported for precision and recall.
pub const CUTOFFS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub map: f64,
    pub epr: f64,
    pub precision: [f64; 3],
    pub recall: [f64; 3],
    pub users: usize,
    pub skipped: usize,
}

/// Column header matching [`MetricReport::tsv_row`].
pub const TSV_HEADER: &str = "model\tprotocol\tMAP\tEPR\tP@1\tP@5\tP@10\tR@1\tR@5\tR@10\tusers\tskipped";

impl MetricReport {
    /// One tab-separated row, metric values in percent.
    pub fn tsv_row(&self, model: &str, protocol: &str) -> String {
        let pct = |v: f64| format!("{:.2}", 100.0 * v);
        let mut cols = vec![model.to_string(), protocol.to_string(), pct(self.map), pct(self.epr)];
        cols.extend(self.precision.iter().map(|&v| pct(v)));
        cols.extend(self.recall.iter().map(|&v| pct(v)));
        cols.push(self.users.to_string());
        cols.push(self.skipped.to_string());
        cols.join("\t")
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct UserMetrics {
    ap: f64,
    epr: f64,
    precision: [f64; 3],
    recall: [f64; 3],
}

fn task_metrics<S: Scorer + ?Sized>(scorer: &S, task: &RankingTask) -> Result<UserMetrics> {
    let ranked = rank_candidates(scorer, task.user, &task.candidates)?;
    let hits: Vec<bool> = ranked.iter().map(|&(i, _)| task.is_relevant(i)).collect();
    let mut m = UserMetrics { ap: average_precision(&hits)?, epr: epr(&hits)?, ..Default::default() };
    for (slot, &k) in CUTOFFS.iter().enumerate() {
        m.precision[slot] = precision_at_k(&hits, k)?;
        m.recall[slot] = recall_at_k(&hits, k)?;
    }
    Ok(m)
}

/// Averages per-user metrics over all tasks. Per-user work fans out over
/// `threads` workers; the reduction runs in task order so the result does
/// not depend on the thread count.
pub fn evaluate<S: Scorer + ?Sized>(scorer: &S, tasks: &TaskSet, threads: usize) -> Result<MetricReport> {
    let per_user: Vec<UserMetrics> = if threads <= 1 {
        tasks.tasks.iter().map(|t| task_metrics(scorer, t)).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?;
        pool.install(|| tasks.tasks.par_iter().map(|t| task_metrics(scorer, t)).collect::<Result<_>>())?
    };
    let n = per_user.len().max(1) as f64;
    let mut report = MetricReport {
        map: 0.0,
        epr: 0.0,
        precision: [0.0; 3],
        recall: [0.0; 3],
        users: per_user.len(),
        skipped: tasks.skipped,
    };
    for m in &per_user {
        report.map += m.ap;
        report.epr += m.epr;
        for s in 0..3 {
            report.precision[s] += m.precision[s];
            report.recall[s] += m.recall[s];
        }
    }
    report.map /= n;
    report.epr /= n;
    report.precision.iter_mut().chain(report.recall.iter_mut()).for_each(|v| *v /= n);
    Ok(report)
}
