//! All-item ranking, Recall/NDCG/MAP at k, and the point baseline.

use std::collections::HashSet;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::datasets::{inference_window, SplitDataset};
use crate::encoder::{Model, PointView};
use crate::error::{Error, Result};
use crate::geometry::BoxSet;
use crate::scalar::Real;

pub const DEFAULT_KS: [usize; 5] = [5, 10, 20, 30, 50];

/// Anything that turns a window into boxes over a model's item table.
pub trait Recommender<T: Real>: Sync {
    fn model(&self) -> &Model<T>;
    fn encode_window(&self, window: &[usize]) -> Result<BoxSet<T>>;
}

impl<T: Real> Recommender<T> for Model<T> {
    fn model(&self) -> &Model<T> {
        self
    }

    fn encode_window(&self, window: &[usize]) -> Result<BoxSet<T>> {
        self.encode_user(window)
    }
}

impl<T: Real> Recommender<T> for PointView<'_, T> {
    fn model(&self) -> &Model<T> {
        PointView::model(self)
    }

    fn encode_window(&self, window: &[usize]) -> Result<BoxSet<T>> {
        self.encode_user(window)
    }
}

/// The model seen with every offset forced to zero.
pub fn point_baseline<T: Real>(model: &Model<T>) -> PointView<'_, T> {
    model.point_view()
}

/// Ascending `(item, distance)` pairs, ties broken by item id.
pub fn rank_by_distance<T: Real>(mut scored: Vec<(usize, T)>) -> Vec<(usize, T)> {
    scored.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("finite distances").then(a.0.cmp(&b.0)));
    scored
}

/// Distances from `set` to every item id in `1..=n_items` that is not in
/// `excluded`, ranked.
pub fn rank_items<T: Real>(
    model: &Model<T>,
    set: &BoxSet<T>,
    excluded: &HashSet<usize>,
) -> Result<Vec<(usize, T)>> {
    let table = model.params.item_embeddings.data();
    let d = model.config.dim;
    let all = set.distances_to_rows(&table[d..], &model.distance)?;
    let scored = all
        .into_iter()
        .enumerate()
        .map(|(k, dist)| (k + 1, dist))
        .filter(|(id, _)| !excluded.contains(id))
        .collect();
    Ok(rank_by_distance(scored))
}

/// Encodes the user's inference window and ranks every item they have not
/// rated in train or validation.
pub fn score_all<T: Real, R: Recommender<T> + ?Sized>(
    rec: &R,
    split: &SplitDataset,
    user: usize,
) -> Result<Vec<(usize, T)>> {
    let model = rec.model();
    if split.n_items() != model.n_items() {
        return Err(Error::data(format!(
            "dataset has {} items, model has {}",
            split.n_items(),
            model.n_items()
        )));
    }
    let window = inference_window(split, user, model.config.window)?;
    let set = rec.encode_window(&window)?;
    rank_items(model, &set, &split.rated(user)?)
}

pub fn recall_at_k(ranked: &[usize], relevant: &HashSet<usize>, k: usize) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let hits = ranked.iter().take(k).filter(|i| relevant.contains(i)).count();
    hits as f64 / relevant.len() as f64
}

/// Binary-gain NDCG with discount `1 / log₂(rank + 1)`.
pub fn ndcg_at_k(ranked: &[usize], relevant: &HashSet<usize>, k: usize) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let discount = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| relevant.contains(i))
        .map(|(r, _)| discount(r + 1))
        .sum();
    let ideal: f64 = (1..=k.min(relevant.len())).map(discount).sum();
    dcg / ideal
}

/// Average precision at `k`, normalized by `min(k, |relevant|)`.
pub fn ap_at_k(ranked: &[usize], relevant: &HashSet<usize>, k: usize) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, i) in ranked.iter().take(k).enumerate() {
        if relevant.contains(i) {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    sum / k.min(relevant.len()) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricRow {
    pub k: usize,
    pub recall: f64,
    pub ndcg: f64,
    pub map: f64,
}

/// Labels copied into the report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportMeta {
    pub dataset: String,
    pub mode: String,
    #[serde(rename = "M")]
    pub boxes: usize,
    pub gamma: f64,
    pub seed: u64,
}

impl ReportMeta {
    pub fn for_model<T>(dataset: &str, model: &Model<T>, seed: u64) -> Self {
        Self {
            dataset: dataset.to_string(),
            mode: model.config.mode.to_string(),
            boxes: model.config.boxes,
            gamma: model.distance.gamma,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub meta: ReportMeta,
    pub rows: Vec<MetricRow>,
    /// Users averaged over.
    pub n_users: usize,
    /// Users without test items, left out of the means.
    pub skipped_users: usize,
}

#[derive(Serialize)]
struct JsonRecord<'a> {
    #[serde(flatten)]
    meta: &'a ReportMeta,
    k: usize,
    recall: f64,
    ndcg: f64,
    map: f64,
    n_users: usize,
    skipped_users: usize,
}

impl EvalReport {
    pub fn row(&self, k: usize) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.k == k)
    }

    /// One row per k.
    pub fn table(&self) -> String {
        let m = &self.meta;
        let mut s = String::new();
        let _ = writeln!(
            s,
            "dataset={} mode={} M={} gamma={} seed={} users={} skipped={}",
            m.dataset, m.mode, m.boxes, m.gamma, m.seed, self.n_users, self.skipped_users
        );
        let _ = writeln!(s, "{:>4}  {:>8}  {:>8}  {:>8}", "k", "Recall", "NDCG", "MAP");
        for r in &self.rows {
            let _ = writeln!(s, "{:>4}  {:>8.4}  {:>8.4}  {:>8.4}", r.k, r.recall, r.ndcg, r.map);
        }
        s
    }

    /// A JSON array with one record per k.
    pub fn to_json(&self) -> String {
        let records: Vec<JsonRecord> = self
            .rows
            .iter()
            .map(|r| JsonRecord {
                meta: &self.meta,
                k: r.k,
                recall: r.recall,
                ndcg: r.ndcg,
                map: r.map,
                n_users: self.n_users,
                skipped_users: self.skipped_users,
            })
            .collect();
        serde_json::to_string_pretty(&records).expect("report serializes")
    }
}

/// Averages the metrics of precomputed rankings. `rankings[u - 1]` belongs
/// to user `u`; users with an empty test split are skipped and counted.
pub fn evaluate_rankings(split: &SplitDataset, rankings: &[Vec<usize>], ks: &[usize], meta: ReportMeta) -> Result<EvalReport> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::invalid("k values must be positive"));
    }
    if rankings.len() != split.n_users() {
        return Err(Error::invalid("one ranking per user is required"));
    }
    let mut sums = vec![(0.0, 0.0, 0.0); ks.len()];
    let (mut n_users, mut skipped) = (0, 0);
    for (u, ranked) in rankings.iter().enumerate() {
        let relevant: HashSet<usize> = split.test[u].iter().copied().collect();
        if relevant.is_empty() {
            skipped += 1;
            continue;
        }
        n_users += 1;
        for (s, &k) in sums.iter_mut().zip(ks) {
            s.0 += recall_at_k(ranked, &relevant, k);
            s.1 += ndcg_at_k(ranked, &relevant, k);
            s.2 += ap_at_k(ranked, &relevant, k);
        }
    }
    if n_users == 0 {
        return Err(Error::data("no user has test items"));
    }
    let n = n_users as f64;
    let rows = ks
        .iter()
        .zip(sums)
        .map(|(&k, (r, g, m))| MetricRow {
            k,
            recall: r / n,
            ndcg: g / n,
            map: m / n,
        })
        .collect();
    Ok(EvalReport {
        meta,
        rows,
        n_users,
        skipped_users: skipped,
    })
}

/// Top-`limit` ranked item ids for every user, in user-id order. Users
/// without test items get an empty list.
pub fn top_items<T: Real, R: Recommender<T> + ?Sized>(rec: &R, split: &SplitDataset, limit: usize) -> Result<Vec<Vec<usize>>> {
    split
        .user_ids()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&u| {
            if split.test[u - 1].is_empty() {
                return Ok(Vec::new());
            }
            let ranked = score_all(rec, split, u)?;
            Ok(ranked.into_iter().take(limit).map(|(i, _)| i).collect())
        })
        .collect()
}

/// Ranks all items for every test user and averages the metrics per k.
pub fn evaluate<T: Real, R: Recommender<T> + ?Sized>(
    rec: &R,
    split: &SplitDataset,
    ks: &[usize],
    meta: ReportMeta,
) -> Result<EvalReport> {
    let limit = ks.iter().copied().max().unwrap_or(0);
    let rankings = top_items(rec, split, limit)?;
    evaluate_rankings(split, &rankings, ks, meta)
}

/// Expected Recall@k of a uniformly random ranking over each user's
/// unrated items, averaged over users with test items.
pub fn random_recall_baseline(split: &SplitDataset, k: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for u in split.user_ids() {
        let relevant: HashSet<usize> = split.test[u - 1].iter().copied().collect();
        if relevant.is_empty() {
            continue;
        }
        let rated = split.rated(u)?;
        let candidates = split.n_items() - rated.len();
        let reachable = relevant.iter().filter(|i| !rated.contains(i)).count();
        if candidates > 0 {
            total += k.min(candidates) as f64 * reachable as f64 / (candidates as f64 * relevant.len() as f64);
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::data("no user has test items"));
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests;
