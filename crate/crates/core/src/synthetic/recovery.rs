use std::collections::{BTreeSet, HashSet};

use rayon::prelude::*;
use serde::Serialize;

use crate::datasets::{inference_window, SplitDataset};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, random_recall_baseline, score_all, Recommender, ReportMeta};
use crate::geometry::{composite_distance, BoxSet, DistanceParams};
use crate::scalar::Real;

use super::world::BoxWorld;

/// How well a trained model recovers a box world.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecoveryReport {
    /// Mean over users of the held-out in-box vs out-of-box AUC.
    pub auc: f64,
    /// Users that had held-out in-box items.
    pub auc_users: usize,
    pub recall_at_10: f64,
    pub random_recall_at_10: f64,
    pub ndcg_at_10: f64,
    /// Mean per-user cluster purity of in-box positives.
    pub purity: f64,
    /// Fraction of users whose learned boxes align with distinct true boxes.
    pub aligned_fraction: f64,
}

/// Probability that a random positive is ranked closer than a random
/// negative, counting ties as one half.
pub fn pairwise_auc(pos: &[f64], neg: &[f64]) -> Option<f64> {
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut sorted = neg.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let mut total = 0.0;
    for &p in pos {
        let below = sorted.partition_point(|&n| n < p);
        let not_above = sorted.partition_point(|&n| n <= p);
        total += (sorted.len() - not_above) as f64 + 0.5 * (not_above - below) as f64;
    }
    Some(total / (pos.len() * neg.len()) as f64)
}

fn user_auc<T: Real, R: Recommender<T> + ?Sized>(
    rec: &R,
    world: &BoxWorld,
    split: &SplitDataset,
    user: usize,
) -> Result<Option<f64>> {
    let seen: HashSet<usize> = world.sequences[user - 1].iter().copied().collect();
    let held_out: HashSet<usize> = split.test[user - 1]
        .iter()
        .copied()
        .filter(|&i| world.in_box(user, i))
        .collect();
    if held_out.is_empty() {
        return Ok(None);
    }
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (item, d) in score_all(rec, split, user)? {
        if held_out.contains(&item) {
            pos.push(d.as_f64());
        } else if !seen.contains(&item) && !world.in_box(user, item) {
            neg.push(d.as_f64());
        }
    }
    Ok(pairwise_auc(&pos, &neg))
}

/// Cluster purity of one user's learned boxes. Each of the user's in-box
/// positives joins the learned box it is closest to; purity is the share of
/// items that carry their cluster's majority true-box label. Also reports
/// whether the non-empty clusters have pairwise distinct majority labels
/// covering `min(M, true boxes)` boxes. `table` holds item rows (row 0 is
/// padding).
pub fn box_purity<T: Real>(
    world: &BoxWorld,
    user: usize,
    set: &BoxSet<T>,
    table: &[T],
    dim: usize,
    distance: &DistanceParams,
) -> Result<(f64, bool)> {
    let n_true = world.true_boxes[user - 1].len();
    let mut counts = vec![vec![0usize; n_true]; set.boxes().len()];
    let mut total = 0usize;
    for &item in &world.sequences[user - 1] {
        let Some(label) = world.box_label(user, item) else {
            continue;
        };
        let row = &table[item * dim..(item + 1) * dim];
        let mut best = (0, T::infinity());
        for (j, b) in set.boxes().iter().enumerate() {
            let d = composite_distance(b, row, distance)?;
            if d < best.1 {
                best = (j, d);
            }
        }
        counts[best.0][label] += 1;
        total += 1;
    }
    if total == 0 {
        return Err(Error::data(format!("user {user} has no in-box positives")));
    }
    let mut majority = Vec::new();
    let mut agree = 0usize;
    for c in counts.iter().filter(|c| c.iter().any(|&n| n > 0)) {
        let (label, &n) = c
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .expect("at least one true box");
        agree += n;
        majority.push(label);
    }
    let distinct: BTreeSet<usize> = majority.iter().copied().collect();
    let aligned = distinct.len() == majority.len() && distinct.len() == set.boxes().len().min(n_true);
    Ok((agree as f64 / total as f64, aligned))
}

/// AUC, Recall@10 against the random baseline, and cluster purity of a
/// model trained on `world`, whose split must be `split`.
pub fn recovery_report<T: Real, R: Recommender<T> + ?Sized>(
    rec: &R,
    world: &BoxWorld,
    split: &SplitDataset,
) -> Result<RecoveryReport> {
    if split.n_users() != world.n_users() || split.n_items() != world.n_items() {
        return Err(Error::data("split does not belong to this world"));
    }
    let users: Vec<usize> = split.user_ids().collect();
    let aucs: Vec<Option<f64>> = users
        .par_iter()
        .map(|&u| user_auc(rec, world, split, u))
        .collect::<Result<_>>()?;
    let aucs: Vec<f64> = aucs.into_iter().flatten().collect();
    let auc = if aucs.is_empty() { f64::NAN } else { aucs.iter().sum::<f64>() / aucs.len() as f64 };

    let model = rec.model();
    let meta = ReportMeta::for_model("box-world", model, world.spec.seed);
    let report = evaluate(rec, split, &[10], meta)?;
    let row = report.row(10).expect("k = 10 requested");

    let d = model.config.dim;
    let table = model.params.item_embeddings.data();
    let purities: Vec<(f64, bool)> = users
        .par_iter()
        .map(|&u| {
            let window = inference_window(split, u, model.config.window)?;
            let set = rec.encode_window(&window)?;
            box_purity(world, u, &set, table, d, &model.distance)
        })
        .collect::<Result<_>>()?;
    let n = purities.len() as f64;
    let purity = purities.iter().map(|p| p.0).sum::<f64>() / n;
    let aligned_fraction = purities.iter().filter(|p| p.1).count() as f64 / n;

    Ok(RecoveryReport {
        auc,
        auc_users: aucs.len(),
        recall_at_10: row.recall,
        random_recall_at_10: random_recall_baseline(split, 10)?,
        ndcg_at_10: row.ndcg,
        purity,
        aligned_fraction,
    })
}
