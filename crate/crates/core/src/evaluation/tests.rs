use std::collections::HashSet;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::datasets::{Vocab, DEFAULT_RATIOS};
use crate::encoder::EncoderConfig;
use crate::geometry::{BoxMode, DistanceParams, Hypercuboid};

/// Textbook definitions over a 0/1 relevance vector of the top k.
fn oracle(ranked: &[usize], relevant: &HashSet<usize>, k: usize) -> (f64, f64, f64) {
    let rel: Vec<f64> = (0..k)
        .map(|r| match ranked.get(r) {
            Some(i) if relevant.contains(i) => 1.0,
            _ => 0.0,
        })
        .collect();
    let recall = rel.iter().sum::<f64>() / relevant.len() as f64;
    let mut dcg = 0.0;
    for (r, g) in rel.iter().enumerate() {
        dcg += g / (r as f64 + 2.0).log2();
    }
    let mut ideal = 0.0;
    for r in 0..k.min(relevant.len()) {
        ideal += 1.0 / (r as f64 + 2.0).log2();
    }
    let mut ap = 0.0;
    for r in 0..k {
        if rel[r] == 1.0 {
            let precision = rel[..=r].iter().sum::<f64>() / (r + 1) as f64;
            ap += precision;
        }
    }
    (recall, dcg / ideal, ap / k.min(relevant.len()) as f64)
}

#[test]
fn worked_example() {
    let ranked = [7, 8, 3, 9, 10, 11, 12, 13, 14, 15];
    let relevant: HashSet<usize> = [3].into_iter().collect();
    assert_eq!(recall_at_k(&ranked, &relevant, 10), 1.0);
    assert!((ndcg_at_k(&ranked, &relevant, 10) - 0.5).abs() < 1e-15);
    assert!((ap_at_k(&ranked, &relevant, 10) - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn perfect_and_empty_rankings() {
    let relevant: HashSet<usize> = [1, 2, 3].into_iter().collect();
    let perfect = [2, 1, 3, 4, 5];
    for k in [1, 3, 5] {
        assert_eq!(ndcg_at_k(&perfect, &relevant, k), 1.0);
        assert_eq!(ap_at_k(&perfect, &relevant, k), 1.0);
    }
    assert_eq!(recall_at_k(&perfect, &relevant, 3), 1.0);
    let miss = [4, 5, 6, 1];
    for f in [recall_at_k, ndcg_at_k, ap_at_k] {
        assert_eq!(f(&miss, &relevant, 3), 0.0);
    }
}

proptest! {
    #[test]
    fn metrics_match_oracle(
        perm_seed in any::<u64>(),
        n in 5usize..40,
        n_rel in 1usize..8,
        k in 1usize..30,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
        let mut ranked: Vec<usize> = (1..=n).collect();
        ranked.shuffle(&mut rng);
        let relevant: HashSet<usize> = (0..n_rel).map(|_| rng.gen_range(1..=n + 3)).collect();
        let (r, g, m) = oracle(&ranked, &relevant, k);
        prop_assert!((recall_at_k(&ranked, &relevant, k) - r).abs() <= 1e-12);
        prop_assert!((ndcg_at_k(&ranked, &relevant, k) - g).abs() <= 1e-12);
        prop_assert!((ap_at_k(&ranked, &relevant, k) - m).abs() <= 1e-12);
        for v in [r, g, m] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(recall_at_k(&ranked, &relevant, k + 1) >= recall_at_k(&ranked, &relevant, k));
    }
}

fn toy_model(mode: BoxMode, boxes: usize, n_items: usize) -> Model<f32> {
    let config = EncoderConfig {
        dim: 6,
        window: 4,
        boxes,
        mode,
        memory_slots: 3,
        init_std: 0.4,
        offset_bias_init: 0.2,
        ..EncoderConfig::default()
    };
    let distance = DistanceParams {
        gamma: 0.3,
        alpha: 150.0,
        use_additional: true,
    };
    Model::init(config, distance, n_items, &mut ChaCha8Rng::seed_from_u64(17)).unwrap()
}

fn toy_split(n_users: usize, n_items: usize, seed: u64) -> SplitDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seqs: Vec<Vec<usize>> = (0..n_users)
        .map(|_| {
            let len = rng.gen_range(5..15);
            (0..len).map(|_| rng.gen_range(1..=n_items)).collect()
        })
        .collect();
    let users = Vocab::from_ids((0..n_users).map(|u| format!("u{u}"))).unwrap();
    let items = Vocab::from_ids((0..n_items).map(|i| format!("i{i}"))).unwrap();
    SplitDataset::from_sequences(users, items, &seqs, DEFAULT_RATIOS).unwrap()
}

#[test]
fn batched_scoring_matches_scalar_loop() {
    for (mode, m) in [(BoxMode::Single, 1), (BoxMode::Concentric, 2), (BoxMode::Independent, 3)] {
        let model = toy_model(mode, m, 50);
        let split = toy_split(3, 50, 1);
        for u in 1..=3 {
            let ranked = score_all(&model, &split, u).unwrap();
            let window = inference_window(&split, u, 4).unwrap();
            let set = model.encode_user(&window).unwrap();
            let rated = split.rated(u).unwrap();
            let mut expect: Vec<(usize, f32)> = (1..=50)
                .filter(|i| !rated.contains(i))
                .map(|i| (i, set.distance(model.item(i), &model.distance).unwrap()))
                .collect();
            expect.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
            assert_eq!(ranked, expect);
            assert!(ranked.iter().all(|(i, _)| !rated.contains(i)));
            let ids: HashSet<usize> = ranked.iter().map(|(i, _)| *i).collect();
            assert_eq!(ids.len(), ranked.len());
        }
    }
}

#[test]
fn point_view_ranks_by_euclidean_distance() {
    let model = toy_model(BoxMode::Single, 1, 40);
    let split = toy_split(2, 40, 2);
    let view = point_baseline(&model);
    let ranked = score_all(&view, &split, 1).unwrap();
    let set = view.encode_user(&inference_window(&split, 1, 4).unwrap()).unwrap();
    let c = set.boxes()[0].center();
    let euclid = |i: usize| -> f32 { model.item(i).iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum() };
    for w in ranked.windows(2) {
        assert!(euclid(w[0].0) <= euclid(w[1].0));
    }
    for (i, d) in &ranked {
        assert_eq!(*d, euclid(*i));
    }
}

#[test]
fn interior_item_ranks_first() {
    let mut model = toy_model(BoxMode::Single, 1, 10);
    model.distance = DistanceParams {
        gamma: 0.0,
        alpha: 200.0,
        use_additional: false,
    };
    let b = Hypercuboid::new(vec![0.0; 6], vec![0.1; 6]).unwrap();
    let set = BoxSet::single(b);
    for i in 1..=10 {
        let row = model.params.item_embeddings.row_slice_mut(i);
        row.fill(if i == 7 { 0.05 } else { 0.5 + i as f32 * 0.01 });
    }
    let ranked = rank_items(&model, &set, &HashSet::new()).unwrap();
    assert_eq!(ranked[0], (7, 0.0));
    let excluded: HashSet<usize> = [7].into_iter().collect();
    assert_eq!(rank_items(&model, &set, &excluded).unwrap()[0].0, 1);
}

#[test]
fn ties_break_by_item_id() {
    let ranked = rank_by_distance(vec![(5, 1.0f32), (2, 0.5), (3, 1.0), (1, 1.0)]);
    let ids: Vec<usize> = ranked.iter().map(|p| p.0).collect();
    assert_eq!(ids, [2, 1, 3, 5]);
}

#[test]
fn evaluate_is_deterministic_and_monotone() {
    let model = toy_model(BoxMode::Independent, 2, 60);
    let mut split = toy_split(12, 60, 3);
    split.test[4].clear();
    let meta = ReportMeta::for_model("toy", &model, 0);
    let a = evaluate(&model, &split, &DEFAULT_KS, meta.clone()).unwrap();
    let b = evaluate(&model, &split, &DEFAULT_KS, meta).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.table(), b.table());
    assert_eq!(a.skipped_users, 1);
    assert_eq!(a.n_users, 11);
    for w in a.rows.windows(2) {
        assert!(w[1].recall >= w[0].recall);
    }
    let json: serde_json::Value = serde_json::from_str(&a.to_json()).unwrap();
    let first = &json[0];
    for key in ["dataset", "mode", "M", "gamma", "k", "recall", "ndcg", "map", "n_users", "seed", "skipped_users"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
    assert_eq!(first["mode"], "independent");
    assert!(a.table().contains("Recall"));
}

#[test]
fn analytic_random_baseline_matches_random_rankings() {
    let split = toy_split(30, 80, 5);
    let k = 10;
    let analytic = random_recall_baseline(&split, k).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let trials = 400;
    let mut samples = Vec::with_capacity(trials);
    for _ in 0..trials {
        let rankings: Vec<Vec<usize>> = split
            .user_ids()
            .map(|u| {
                let rated = split.rated(u).unwrap();
                let mut ids: Vec<usize> = (1..=80).filter(|i| !rated.contains(i)).collect();
                ids.shuffle(&mut rng);
                ids
            })
            .collect();
        let meta = ReportMeta {
            dataset: "toy".into(),
            mode: "random".into(),
            boxes: 0,
            gamma: 0.0,
            seed: 0,
        };
        let report = evaluate_rankings(&split, &rankings, &[k], meta).unwrap();
        samples.push(report.rows[0].recall);
    }
    let mean = samples.iter().sum::<f64>() / trials as f64;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
    let se = (var / trials as f64).sqrt();
    assert!((mean - analytic).abs() < 3.0 * se, "mean {mean}, analytic {analytic}, se {se}");
}

#[test]
fn rejects_mismatched_model() {
    let model = toy_model(BoxMode::Single, 1, 10);
    let split = toy_split(2, 12, 1);
    assert!(score_all(&model, &split, 1).is_err());
    let split = toy_split(2, 10, 1);
    assert!(score_all(&model, &split, 3).is_err());
}
