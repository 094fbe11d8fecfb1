//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Criteria 1-5, 10 and 11 are invariants and decide the exit status.
//! Criteria 6-9 are empirical outcomes of training runs on synthetic worlds;
//! they are reported as measured and never forced.

use std::collections::HashSet;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use boxrec::autodiff::op_gradient_suite;
use boxrec::datasets::SplitDataset;
use boxrec::encoder::{Ablation, EncoderConfig, Pooling};
use boxrec::evaluation::{ap_at_k, evaluate, ndcg_at_k, recall_at_k, ReportMeta};
use boxrec::geometry::{
    composite_distance, concentric_distance, contains, independent_distance, nearest_surface_point,
    outside_distance, BoxMode, BoxSet, DistanceParams, Hypercuboid,
};
use boxrec::synthetic::{
    generate_box_world, grid_nearest_point_oracle, grid_tolerance, recovery_report, BoxWorld, RecoveryReport, WorldSpec,
    MIN_GRID_RESOLUTION,
};
use boxrec::training::{fit, loss_gradient_check, TrainConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_box(rng: &mut ChaCha8Rng, d: usize) -> Hypercuboid<f64> {
    let center = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let offset = (0..d)
        .map(|_| if rng.gen_bool(0.1) { 0.0 } else { rng.gen_range(0.0..1.0) })
        .collect();
    Hypercuboid::new(center, offset).unwrap()
}

fn geometry_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let (mut inside, mut mismatches) = (0, 0);
    for case in 0..1000 {
        let d = 2 + case % 3;
        let b = random_box(&mut rng, d);
        let item: Vec<f64> = if rng.gen_bool(0.3) {
            (0..d).map(|j| b.center()[j] + b.offset()[j] * rng.gen_range(-1.0..=1.0)).collect()
        } else {
            (0..d).map(|_| rng.gen_range(-2.2..2.2)).collect()
        };
        let closed = outside_distance(&b, &item).unwrap();
        let near = nearest_surface_point(&b, &item).unwrap();
        let via_point: f64 = near.iter().zip(&item).map(|(p, v)| (p - v) * (p - v)).sum();
        let (_, grid) = grid_nearest_point_oracle(&b, &item, MIN_GRID_RESOLUTION).unwrap();
        let gap = (grid.sqrt() - closed.sqrt()).abs();
        let tol = grid_tolerance(&b, MIN_GRID_RESOLUTION);
        worst = worst.max(gap / tol);
        let is_in = contains(&b, &item).unwrap();
        inside += usize::from(is_in);
        if gap > tol || closed > grid + 1e-12 || (closed == 0.0) != is_in || (via_point - closed).abs() > 1e-12 {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    outcome(
        mismatches == 0 && elapsed < Duration::from_secs(30),
        format!("1000 cases ({inside} interior), {mismatches} mismatches, worst gap {worst:.3} of tolerance, {elapsed:.1?}"),
    )
}

fn reduction_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let d = rng.gen_range(1..=8);
        let b = random_box(&mut rng, d);
        let item: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let params = DistanceParams::new(rng.gen_range(0.0..1.0), rng.gen_range(101.0..300.0), rng.gen_bool(0.5)).unwrap();
        let base = composite_distance(&b, &item, &params).unwrap();
        let conc = concentric_distance(&BoxSet::new(BoxMode::Concentric, vec![b.clone()]).unwrap(), &item, &params).unwrap();
        let ind = independent_distance(&BoxSet::new(BoxMode::Independent, vec![b]).unwrap(), &item, &params).unwrap();
        worst = worst.max((conc - base).abs()).max((ind - base).abs());
    }
    outcome(worst <= 1e-12, format!("10000 cases, max |difference| {worst:.2e}"))
}

fn equidistant_items_ranked_by_box() -> Outcome {
    let b = Hypercuboid::new(vec![0.0, 0.0], vec![2.0, 1.0]).unwrap();
    let params = DistanceParams::new(0.0, 200.0, false).unwrap();
    let (v1, v2) = ([2.0, 0.0], [0.0, 2.0]);
    let l1 = composite_distance(&b, &v1, &params).unwrap();
    let l2 = composite_distance(&b, &v2, &params).unwrap();
    let n1 = (v1[0] * v1[0] + v1[1] * v1[1]) as f64;
    let n2 = (v2[0] * v2[0] + v2[1] * v2[1]) as f64;
    outcome(
        l1 == 0.0 && l2 == 1.0 && n1 == n2,
        format!("l(v1)={l1} l(v2)={l2}, |v1-C|^2={n1} |v2-C|^2={n2}"),
    )
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let (step, tol) = (1e-4, 1e-3);
    let mut failures = Vec::new();
    let mut checks = 0;
    for (name, report) in op_gradient_suite(0, step, tol).unwrap() {
        checks += 1;
        if !report.passed() {
            failures.push(name.to_string());
        }
    }
    let shapes = [
        (BoxMode::Single, 1),
        (BoxMode::Concentric, 1),
        (BoxMode::Concentric, 2),
        (BoxMode::Independent, 1),
        (BoxMode::Independent, 2),
    ];
    for (mode, m) in shapes {
        for gamma in [0.0, 0.5] {
            for additional in [false, true] {
                let params = DistanceParams::new(gamma, 200.0, additional).unwrap();
                let report = loss_gradient_check(mode, m, params, 0, step, tol).unwrap();
                checks += 1;
                if !report.passed() {
                    failures.push(format!("loss {mode} M={m} gamma={gamma} additional={additional}"));
                }
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        failures.is_empty() && elapsed < Duration::from_secs(120),
        format!("{checks} checks, failed: {failures:?}, {elapsed:.1?}"),
    )
}

fn brute_metrics(ranked: &[usize], relevant: &HashSet<usize>, k: usize) -> (f64, f64, f64) {
    let top: Vec<bool> = ranked.iter().take(k).map(|i| relevant.contains(i)).collect();
    let hits = top.iter().filter(|&&r| r).count() as f64;
    let recall = hits / relevant.len() as f64;
    let dcg = |flags: &[bool]| -> f64 {
        flags
            .iter()
            .enumerate()
            .map(|(p, &r)| if r { 1.0 / (p as f64 + 2.0).log2() } else { 0.0 })
            .sum()
    };
    let mut ideal = vec![true; relevant.len()];
    ideal.resize(ranked.len().max(relevant.len()), false);
    ideal.truncate(k);
    let ndcg = dcg(&top) / dcg(&ideal);
    let mut precisions = Vec::new();
    for p in 0..top.len() {
        if top[p] {
            let seen = top[..=p].iter().filter(|&&r| r).count() as f64;
            precisions.push(seen / (p + 1) as f64);
        }
    }
    let ap = precisions.iter().sum::<f64>() / (k.min(relevant.len()) as f64);
    (recall, ndcg, ap)
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(5..60);
        let mut ranked: Vec<usize> = (1..=n).collect();
        ranked.shuffle(&mut rng);
        let n_rel = rng.gen_range(1..=n.min(15));
        let relevant: HashSet<usize> = ranked.choose_multiple(&mut rng, n_rel).copied().collect();
        let k = rng.gen_range(1..=n + 5);
        let (r, g, a) = brute_metrics(&ranked, &relevant, k);
        worst = worst
            .max((recall_at_k(&ranked, &relevant, k) - r).abs())
            .max((ndcg_at_k(&ranked, &relevant, k) - g).abs())
            .max((ap_at_k(&ranked, &relevant, k) - a).abs());
    }
    let ranked = [7, 8, 9, 10, 11, 12, 13, 14, 15, 16];
    let relevant: HashSet<usize> = [9].into();
    let (r, g, a) = (recall_at_k(&ranked, &relevant, 10), ndcg_at_k(&ranked, &relevant, 10), ap_at_k(&ranked, &relevant, 10));
    let example = (r - 1.0).abs() < 1e-12 && (g - 0.5).abs() < 1e-12 && (a - 1.0 / 3.0).abs() < 1e-12;
    outcome(
        worst < 1e-12 && example,
        format!("100 instances, max |difference| {worst:.2e}; rank-3 example recall {r} ndcg {g:.6} ap {a:.6}"),
    )
}

/// Hyperparameters shared by every training run below, fixed before the
/// acceptance seeds were drawn.
fn run_config(seed: u64) -> TrainConfig {
    TrainConfig {
        encoder: EncoderConfig {
            dim: 16,
            window: 5,
            memory_slots: 5,
            ..EncoderConfig::default()
        },
        targets: 2,
        epochs: 30,
        batch_size: 32,
        learning_rate: 0.1,
        l2: 0.05,
        seed,
        ..TrainConfig::default()
    }
}

fn world(boxes: usize, seed: u64, switch_prob: Option<f64>) -> (BoxWorld, SplitDataset) {
    let mut spec = WorldSpec::new(50, 500, 4, boxes, 0.05, seed);
    if let Some(p) = switch_prob {
        spec.switch_prob = p;
    }
    let world = generate_box_world(&spec).unwrap();
    let split = world.split().unwrap();
    (world, split)
}

fn trained_report(world: &BoxWorld, split: &SplitDataset, config: &TrainConfig) -> RecoveryReport {
    let model = fit(split, config, None).unwrap().model;
    recovery_report(&model, world, split).unwrap()
}

fn single_box_recovery() -> Outcome {
    let start = Instant::now();
    let (w, split) = world(1, 2024, None);
    let r = trained_report(&w, &split, &run_config(0));
    let elapsed = start.elapsed();
    let ratio = r.recall_at_10 / r.random_recall_at_10;
    outcome(
        r.auc >= 0.8 && ratio >= 3.0 && elapsed < Duration::from_secs(300),
        format!(
            "AUC {:.3} over {} users (need >= 0.8), Recall@10 {:.3} = {ratio:.1}x random {:.4} (need >= 3x), {elapsed:.1?}",
            r.auc, r.auc_users, r.recall_at_10, r.random_recall_at_10
        ),
    )
}

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn sign_test(name: &str, pairs: &[(f64, f64)]) -> (bool, String) {
    let wins = pairs.iter().filter(|(a, b)| a >= b).count();
    let listed: Vec<String> = pairs.iter().map(|(a, b)| format!("{a:.3}/{b:.3}")).collect();
    (wins >= 4, format!("{name} {wins}/5 seeds [{}]", listed.join(" ")))
}

fn ablation_direction() -> Outcome {
    let mut pairs = Vec::new();
    for s in SEEDS {
        let (w, split) = world(2, 7000 + s, Some(0.2));
        let full = trained_report(&w, &split, &run_config(s));
        let mut c = run_config(s);
        c.encoder.ablation = Ablation::NoNn;
        let plain = trained_report(&w, &split, &c);
        pairs.push((full.ndcg_at_10, plain.ndcg_at_10));
    }
    let (pass, detail) = sign_test("full >= no-nn NDCG@10:", &pairs);
    outcome(pass, detail)
}

fn offsets_direction() -> Outcome {
    let mut pairs = Vec::new();
    for s in SEEDS {
        let (w, split) = world(1, 8000 + s, None);
        let boxed = trained_report(&w, &split, &run_config(s));
        let mut c = run_config(s);
        c.encoder.freeze_offsets = true;
        let point = trained_report(&w, &split, &c);
        pairs.push((boxed.auc, point.auc));
    }
    let (pass, detail) = sign_test("learned >= frozen offsets AUC:", &pairs);
    outcome(pass, detail)
}

fn multi_box_direction() -> Outcome {
    let mut pairs = Vec::new();
    let (mut purity_multi, mut purity_single) = (0.0, 0.0);
    for s in SEEDS {
        let (w, split) = world(3, 9000 + s, None);
        let mut c = run_config(s);
        c.encoder.mode = BoxMode::Independent;
        c.encoder.boxes = 3;
        let multi = trained_report(&w, &split, &c);
        let single = trained_report(&w, &split, &run_config(s));
        pairs.push((multi.recall_at_10, single.recall_at_10));
        purity_multi += multi.purity / SEEDS.len() as f64;
        purity_single += single.purity / SEEDS.len() as f64;
    }
    let (wins, detail) = sign_test("M=3 >= single Recall@10:", &pairs);
    let purer = purity_multi > purity_single;
    outcome(
        wins && purer,
        format!("{detail}; mean purity {purity_multi:.3} vs {purity_single:.3}"),
    )
}

fn determinism() -> Outcome {
    let (_, split) = world(2, 42, None);
    let mut c = run_config(3);
    c.epochs = 3;
    c.encoder.mode = BoxMode::Concentric;
    c.encoder.boxes = 2;
    c.encoder.dropout = 0.2;
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut checkpoints = Vec::new();
    let mut reports = Vec::new();
    for dir in &dirs {
        let model = fit(&split, &c, Some(dir.path())).unwrap().model;
        checkpoints.push(std::fs::read(dir.path().join("model.ckpt")).unwrap());
        let meta = ReportMeta::for_model("world-42", &model, 3);
        reports.push(evaluate(&model, &split, &[5, 10, 20], meta).unwrap().to_json());
    }
    let same_ckpt = checkpoints[0] == checkpoints[1];
    let same_report = reports[0] == reports[1];
    outcome(
        same_ckpt && same_report,
        format!(
            "checkpoints identical: {same_ckpt} ({} bytes), reports identical: {same_report}",
            checkpoints[0].len()
        ),
    )
}

fn pooling_table() -> Outcome {
    let (_, split) = world(1, 77, None);
    let mut table = String::from("    pooling  Recall@10  NDCG@10  MAP@10\n");
    let mut ok = true;
    for pooling in Pooling::ALL {
        let mut c = run_config(0);
        c.epochs = 5;
        c.encoder.pooling = pooling;
        let model = fit(&split, &c, None).unwrap().model;
        let report = evaluate(&model, &split, &[10], ReportMeta::for_model("world-77", &model, 0)).unwrap();
        let row = report.row(10).unwrap();
        ok &= row.recall.is_finite() && row.ndcg.is_finite() && row.map.is_finite();
        table.push_str(&format!(
            "    {:<7}  {:>9.4}  {:>7.4}  {:>6.4}\n",
            pooling.name(),
            row.recall,
            row.ndcg,
            row.map
        ));
    }
    outcome(ok, format!("all four pooling modes evaluated\n{}", table.trim_end()))
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let criteria: [(usize, &str, bool, fn() -> Outcome); 11] = [
        (1, "geometry oracle", true, geometry_oracle),
        (2, "single-box reduction identities", true, reduction_identities),
        (3, "equidistant items ranked by the box", true, equidistant_items_ranked_by_box),
        (4, "gradient suite", true, gradient_suite),
        (5, "metric oracle", true, metric_oracle),
        (6, "single-box recovery", false, single_box_recovery),
        (7, "no-nn ablation direction", false, ablation_direction),
        (8, "learned vs frozen offsets direction", false, offsets_direction),
        (9, "three boxes vs one direction", false, multi_box_direction),
        (10, "determinism", true, determinism),
        (11, "pooling comparison", true, pooling_table),
    ];
    let mut hard_failures = 0;
    let mut empirical_failures = 0;
    for (n, name, hard, run) in criteria {
        let result = run();
        let verdict = if result.pass { "PASS" } else { "FAIL" };
        println!("criterion {n:>2} {verdict}: {name}: {}", result.detail);
        if !result.pass {
            if hard {
                hard_failures += 1;
            } else {
                empirical_failures += 1;
            }
        }
    }
    println!("invariant failures: {hard_failures}, empirical failures: {empirical_failures}");
    if hard_failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
