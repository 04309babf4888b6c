//! Rating ingestion, implicit-feedback datasets, relevance labels and splits.
//!
//! Raw ids are kept verbatim in [`IdMap`]s; everything downstream works with
//! dense `u32` indices assigned in first-appearance order.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::{BufRead, Write};
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::linalg::rng_from_seed;
use crate::{Error, ItemId, Result, UserId};

#[derive(Debug, Clone, PartialEq)]
pub struct RatingRecord {
    pub user: String,
    pub item: String,
    pub rating: f64,
    pub timestamp: Option<i64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RatingFormat {
    /// `user::item::rating::timestamp`
    #[serde(rename = "ml10m_dat")]
    Ml10mDat,
    /// `user,item,rating[,timestamp]` with an optional header line.
    #[serde(rename = "csv")]
    Csv,
}

impl FromStr for RatingFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ml10m_dat" | "dat" => Ok(RatingFormat::Ml10mDat),
            "csv" => Ok(RatingFormat::Csv),
            other => Err(Error::config(format!("unknown rating format `{other}`"))),
        }
    }
}

/// Parses one record per non-empty row, preserving ids and row order.
pub fn ingest_ratings<R: BufRead>(source: R, format: RatingFormat) -> Result<Vec<RatingRecord>> {
    let mut out = Vec::new();
    for (idx, line) in source.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = match format {
            RatingFormat::Ml10mDat => line.split("::").collect(),
            RatingFormat::Csv => line.split(',').map(str::trim).collect(),
        };
        if format == RatingFormat::Csv && idx == 0 && fields[0].parse::<f64>().is_err() {
            continue;
        }
        out.push(parse_fields(&fields, line_no)?);
    }
    Ok(out)
}

fn parse_fields(fields: &[&str], line: usize) -> Result<RatingRecord> {
    let err = |message: String| Error::Parse { line, message };
    if fields.len() != 3 && fields.len() != 4 {
        return Err(err(format!("expected 3 or 4 fields, found {}", fields.len())));
    }
    if fields[0].is_empty() || fields[1].is_empty() {
        return Err(err("empty user or item id".into()));
    }
    let rating: f64 = fields[2]
        .parse()
        .map_err(|_| err(format!("invalid rating `{}`", fields[2])))?;
    if !(0.0..=5.0).contains(&rating) {
        return Err(err(format!("rating {rating} outside [0, 5]")));
    }
    let timestamp = match fields.get(3) {
        Some(ts) => Some(
            ts.parse::<i64>()
                .map_err(|_| err(format!("invalid timestamp `{ts}`")))?,
        ),
        None => None,
    };
    Ok(RatingRecord {
        user: fields[0].to_string(),
        item: fields[1].to_string(),
        rating,
        timestamp,
    })
}

/// Bidirectional map between raw ids and dense indices.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdMap {
    ids: Vec<String>,
    index: HashMap<String, u32>,
}

impl IdMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_insert(&mut self, id: &str) -> u32 {
        if let Some(&idx) = self.index.get(id) {
            return idx;
        }
        let idx = self.ids.len() as u32;
        self.ids.push(id.to_string());
        self.index.insert(id.to_string(), idx);
        idx
    }

    pub fn index_of(&self, id: &str) -> Option<u32> {
        self.index.get(id).copied()
    }

    pub fn id(&self, idx: u32) -> &str {
        &self.ids[idx as usize]
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Writes `index<TAB>id` rows.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        for (idx, id) in self.ids.iter().enumerate() {
            writeln!(w, "{idx}\t{id}")?;
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(r: R) -> Result<IdMap> {
        let mut map = IdMap::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (idx, id) = line.split_once('\t').ok_or_else(|| Error::Parse {
                line: n + 1,
                message: "expected `index<TAB>id`".into(),
            })?;
            let idx: usize = idx.parse().map_err(|_| Error::Parse {
                line: n + 1,
                message: format!("invalid index `{idx}`"),
            })?;
            if idx != map.len() {
                return Err(Error::Parse {
                    line: n + 1,
                    message: format!("indices must be dense and ordered, got {idx}"),
                });
            }
            map.get_or_insert(id);
        }
        Ok(map)
    }
}

/// Immutable table of (user, item) selection events.
#[derive(Debug, Clone)]
pub struct ImplicitDataset {
    users: Arc<IdMap>,
    items: Arc<IdMap>,
    pairs: Vec<(UserId, ItemId)>,
    item_counts: Vec<u64>,
    item_users: Vec<Vec<UserId>>,
    user_items: Vec<Vec<ItemId>>,
}

impl ImplicitDataset {
    /// Builds the per-item and per-user indexes for `pairs`.
    pub fn from_pairs(
        users: Arc<IdMap>,
        items: Arc<IdMap>,
        pairs: Vec<(UserId, ItemId)>,
    ) -> Result<Self> {
        let (n_users, n_items) = (users.len(), items.len());
        let mut item_counts = vec![0u64; n_items];
        let mut item_users = vec![Vec::new(); n_items];
        let mut user_items = vec![Vec::new(); n_users];
        for &(u, i) in &pairs {
            if u as usize >= n_users || i as usize >= n_items {
                return Err(Error::data(format!(
                    "pair ({u}, {i}) outside index space {n_users}x{n_items}"
                )));
            }
            item_counts[i as usize] += 1;
            item_users[i as usize].push(u);
            user_items[u as usize].push(i);
        }
        for list in item_users.iter_mut().chain(user_items.iter_mut()) {
            list.sort_unstable();
            list.dedup();
        }
        Ok(ImplicitDataset { users, items, pairs, item_counts, item_users, user_items })
    }

    pub fn users(&self) -> &Arc<IdMap> {
        &self.users
    }

    pub fn items(&self) -> &Arc<IdMap> {
        &self.items
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn pairs(&self) -> &[(UserId, ItemId)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// N_i: number of pairs whose item is `item`.
    pub fn item_count(&self, item: ItemId) -> u64 {
        self.item_counts[item as usize]
    }

    pub fn item_counts(&self) -> &[u64] {
        &self.item_counts
    }

    /// U_i, sorted ascending.
    pub fn item_users(&self, item: ItemId) -> &[UserId] {
        &self.item_users[item as usize]
    }

    /// Items selected by `user`, sorted ascending.
    pub fn user_items(&self, user: UserId) -> &[ItemId] {
        &self.user_items[user as usize]
    }

    pub fn user_has_item(&self, user: UserId, item: ItemId) -> bool {
        self.user_items[user as usize].binary_search(&item).is_ok()
    }

    /// Users with at least one pair, ascending.
    pub fn active_users(&self) -> impl Iterator<Item = UserId> + '_ {
        self.user_items
            .iter()
            .enumerate()
            .filter(|(_, items)| !items.is_empty())
            .map(|(u, _)| u as UserId)
    }

    /// Same index spaces, different pairs.
    pub fn with_pairs(&self, pairs: Vec<(UserId, ItemId)>) -> Result<Self> {
        Self::from_pairs(self.users.clone(), self.items.clone(), pairs)
    }

    /// Writes `user_index<TAB>item_index` rows.
    pub fn write_pairs<W: Write>(&self, mut w: W) -> Result<()> {
        for &(u, i) in &self.pairs {
            writeln!(w, "{u}\t{i}")?;
        }
        Ok(())
    }

    pub fn read_pairs<R: BufRead>(r: R, users: Arc<IdMap>, items: Arc<IdMap>) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse = |s: &str| {
                s.parse::<u32>().map_err(|_| Error::Parse {
                    line: n + 1,
                    message: format!("invalid index `{s}`"),
                })
            };
            let (u, i) = line.split_once('\t').ok_or_else(|| Error::Parse {
                line: n + 1,
                message: "expected `user<TAB>item`".into(),
            })?;
            pairs.push((parse(u)?, parse(i)?));
        }
        Self::from_pairs(users, items, pairs)
    }
}

/// Keeps pairs rated at or above `positive_threshold`, dropping rating values
/// and duplicate (user, item) pairs.
pub fn to_implicit(ratings: &[RatingRecord], positive_threshold: f64) -> Result<ImplicitDataset> {
    if !(positive_threshold > 0.0 && positive_threshold <= 5.0) {
        return Err(Error::config(format!(
            "positive threshold {positive_threshold} outside (0, 5]"
        )));
    }
    let mut users = IdMap::new();
    let mut items = IdMap::new();
    let mut seen = HashSet::new();
    let mut pairs = Vec::new();
    for r in ratings.iter().filter(|r| r.rating >= positive_threshold) {
        let u = users.get_or_insert(&r.user);
        let i = items.get_or_insert(&r.item);
        if seen.insert((u, i)) {
            pairs.push((u, i));
        }
    }
    ImplicitDataset::from_pairs(Arc::new(users), Arc::new(items), pairs)
}

/// Train/validation/test fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions { train: 0.8, valid: 0.1, test: 0.1 }
    }
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: ImplicitDataset,
    pub valid: ImplicitDataset,
    pub test: ImplicitDataset,
}

/// Uniformly random partition of the pairs. Pair order inside each part
/// follows the parent's order.
pub fn split(dataset: &ImplicitDataset, fractions: SplitFractions, seed: u64) -> Result<Split> {
    let SplitFractions { train, valid, test } = fractions;
    if [train, valid, test].iter().any(|f| !(*f > 0.0)) {
        return Err(Error::config("split fractions must be positive"));
    }
    if (train + valid + test - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!(
            "split fractions sum to {}, expected 1",
            train + valid + test
        )));
    }
    let n = dataset.len();
    let n_train = ((train * n as f64).round() as usize).min(n);
    let n_valid = ((valid * n as f64).round() as usize).min(n - n_train);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from_seed(seed));
    let mut part = vec![2u8; n];
    for &p in &order[..n_train] {
        part[p] = 0;
    }
    for &p in &order[n_train..n_train + n_valid] {
        part[p] = 1;
    }
    let mut buckets: [Vec<(UserId, ItemId)>; 3] = Default::default();
    for (pair, &which) in dataset.pairs().iter().zip(&part) {
        buckets[which as usize].push(*pair);
    }
    let [tr, va, te] = buckets;
    Ok(Split {
        train: dataset.with_pairs(tr)?,
        valid: dataset.with_pairs(va)?,
        test: dataset.with_pairs(te)?,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserLabels {
    pub relevant: BTreeSet<String>,
    pub not_relevant: BTreeSet<String>,
}

/// Per-user relevance sets in raw-id space.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RelevanceLabels {
    users: BTreeMap<String, UserLabels>,
}

impl RelevanceLabels {
    pub fn get(&self, user: &str) -> Option<&UserLabels> {
        self.users.get(user)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &UserLabels)> {
        self.users.iter()
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    /// Writes `user<TAB>item<TAB>1|0` rows (1 = relevant).
    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        for (user, labels) in &self.users {
            for item in &labels.relevant {
                writeln!(w, "{user}\t{item}\t1")?;
            }
            for item in &labels.not_relevant {
                writeln!(w, "{user}\t{item}\t0")?;
            }
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(r: R) -> Result<RelevanceLabels> {
        let mut labels = RelevanceLabels::default();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let entry = match fields.as_slice() {
                [u, _, _] => labels.users.entry(u.to_string()).or_default(),
                _ => {
                    return Err(Error::Parse {
                        line: n + 1,
                        message: "expected `user<TAB>item<TAB>label`".into(),
                    })
                }
            };
            match fields[2] {
                "1" => entry.relevant.insert(fields[1].to_string()),
                "0" => entry.not_relevant.insert(fields[1].to_string()),
                other => {
                    return Err(Error::Parse {
                        line: n + 1,
                        message: format!("invalid label `{other}`"),
                    })
                }
            };
        }
        Ok(labels)
    }

    /// True when no user has an item in both sets.
    pub fn is_disjoint(&self) -> bool {
        self.users.values().all(|l| l.relevant.is_disjoint(&l.not_relevant))
    }
}

/// Items rated at or above `relevant_threshold` are relevant, items rated
/// strictly below `not_relevant_below` are not relevant, and the band in
/// between is left unlabelled. When a pair is rated more than once the last
/// row wins.
pub fn build_relevance(
    ratings: &[RatingRecord],
    relevant_threshold: f64,
    not_relevant_below: f64,
) -> Result<RelevanceLabels> {
    if not_relevant_below > relevant_threshold {
        return Err(Error::config(format!(
            "not-relevant cutoff {not_relevant_below} exceeds relevant threshold {relevant_threshold}"
        )));
    }
    let mut latest: BTreeMap<(&str, &str), f64> = BTreeMap::new();
    for r in ratings {
        latest.insert((&r.user, &r.item), r.rating);
    }
    let mut labels = RelevanceLabels::default();
    for ((user, item), rating) in latest {
        let entry = labels.users.entry(user.to_string()).or_default();
        if rating >= relevant_threshold {
            entry.relevant.insert(item.to_string());
        } else if rating < not_relevant_below {
            entry.not_relevant.insert(item.to_string());
        }
    }
    Ok(labels)
}
