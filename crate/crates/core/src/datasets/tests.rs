use std::collections::HashMap;
use std::path::Path;

use proptest::prelude::*;

use super::*;

fn origin() -> &'static Path {
    Path::new("log.tsv")
}

#[test]
fn parses_a_tsv_row() {
    let log = parse_log("u1\ti9\t1500000000\n", LogFormat::Tsv, None, origin()).unwrap();
    assert_eq!(log, vec![Interaction::new("u1", "i9", 1_500_000_000)]);
}

#[test]
fn csv_with_ratings_and_threshold() {
    let text = "u1,i1,10,5\nu1,i2,11,3\nu1,i3,12,4\nu2,i1,13\n";
    let log = parse_log(text, LogFormat::Csv, Some(4.0), origin()).unwrap();
    let items: Vec<&str> = log.iter().map(|r| r.item.as_str()).collect();
    assert_eq!(items, ["i1", "i3", "i1"]);
    assert_eq!(log[0].rating, Some(5.0));
    assert_eq!(log[2].rating, None);
    assert_eq!(parse_log(text, LogFormat::Csv, None, origin()).unwrap().len(), 4);
}

#[test]
fn bad_rows_name_their_line() {
    let err = parse_log("u1\ti1\t5\nu1\ti2\tyesterday\n", LogFormat::Tsv, None, origin()).unwrap_err();
    match err {
        Error::Parse { line, message, .. } => {
            assert_eq!(line, 2);
            assert!(message.contains("yesterday"));
        }
        other => panic!("unexpected {other:?}"),
    }
    let err = parse_log("u1\ti1\n", LogFormat::Tsv, None, origin()).unwrap_err();
    assert!(matches!(err, Error::Parse { line: 1, .. }));
    let err = parse_log("u1\ti1\t-4\n", LogFormat::Tsv, None, origin()).unwrap_err();
    assert!(matches!(err, Error::Parse { line: 1, .. }));
    assert!(matches!(parse_log("", LogFormat::Tsv, None, origin()), Err(Error::Data(_))));
    assert!(matches!(parse_log("\n\n", LogFormat::Tsv, None, origin()), Err(Error::Data(_))));
}

#[test]
fn load_log_reports_missing_file() {
    let err = load_log(Path::new("/nonexistent/x.tsv"), LogFormat::Tsv, None).unwrap_err();
    assert!(err.to_string().contains("/nonexistent/x.tsv"));
}

fn rows(spec: &[(&str, &str)]) -> Vec<Interaction> {
    spec.iter()
        .enumerate()
        .map(|(t, (u, i))| Interaction::new(*u, *i, t as u64))
        .collect()
}

#[test]
fn filter_thresholds() {
    // u1: 10 actions over 5 items (each item seen twice by u1 and once by u2).
    let mut spec = Vec::new();
    for k in 0..10 {
        spec.push(("u1", ["a", "b", "c", "d", "e"][k % 5]));
    }
    // u2: 9 actions, removed.
    for k in 0..9 {
        spec.push(("u2", ["a", "b", "c", "d", "e"][k % 5]));
    }
    let log = rows(&spec);
    // With u2 gone each item has exactly 2 actions, so items are removed too
    // and the result is empty.
    assert!(filter_min_activity(log.clone()).is_err());
    let kept = filter_min_activity_with(log, 10, 2).unwrap();
    assert!(kept.iter().all(|r| r.user == "u1"));
    assert_eq!(kept.len(), 10);
}

#[test]
fn item_with_exactly_five_actions_is_kept() {
    let mut spec = Vec::new();
    for u in ["u1", "u2", "u3", "u4", "u5"] {
        for k in 0..10 {
            spec.push((u, if k == 0 { "rare" } else { ["a", "b", "c"][k % 3] }));
        }
    }
    let kept = filter_min_activity(rows(&spec)).unwrap();
    assert_eq!(kept.iter().filter(|r| r.item == "rare").count(), 5);
    assert_eq!(kept.len(), 50);
}

/// Repeated single passes until no row changes, written without shared code.
fn filter_oracle(log: &[Interaction], min_user: usize, min_item: usize) -> Vec<Interaction> {
    let mut cur = log.to_vec();
    loop {
        let mut changed = false;
        let count_u = |rows: &[Interaction], u: &str| rows.iter().filter(|r| r.user == u).count();
        let count_i = |rows: &[Interaction], i: &str| rows.iter().filter(|r| r.item == i).count();
        let mut next = Vec::new();
        for r in &cur {
            if count_u(&cur, &r.user) >= min_user && count_i(&cur, &r.item) >= min_item {
                next.push(r.clone());
            } else {
                changed = true;
            }
        }
        cur = next;
        if !changed {
            return cur;
        }
    }
}

#[test]
fn cascade_matches_repeated_pass_oracle() {
    // 20 rows: removing items `z` and `w` pushes u2 below 4 actions.
    let spec = [
        ("u1", "x"), ("u1", "y"), ("u1", "x"), ("u1", "y"), ("u1", "x"),
        ("u2", "z"), ("u2", "z"), ("u2", "x"), ("u2", "y"),
        ("u3", "x"), ("u3", "y"), ("u3", "z"), ("u3", "x"), ("u3", "y"),
        ("u4", "z"), ("u4", "x"), ("u4", "y"), ("u4", "x"), ("u4", "w"), ("u4", "y"),
    ];
    let log = rows(&spec);
    let expect = filter_oracle(&log, 4, 5);
    assert_eq!(filter_min_activity_with(log, 4, 5).unwrap(), expect);
    assert_eq!(expect.len(), 13);
    assert!(expect.iter().all(|r| r.user != "u2" && r.item != "z" && r.item != "w"));
}

proptest! {
    #[test]
    fn filter_reaches_the_oracle_fixed_point(
        raw in prop::collection::vec((0u8..6, 0u8..8), 0..80),
        min_user in 1usize..6,
        min_item in 1usize..5,
    ) {
        let log: Vec<Interaction> = raw
            .iter()
            .enumerate()
            .map(|(t, (u, i))| Interaction::new(format!("u{u}"), format!("i{i}"), t as u64))
            .collect();
        let expect = filter_oracle(&log, min_user, min_item);
        match filter_min_activity_with(log, min_user, min_item) {
            Ok(kept) => {
                prop_assert_eq!(&kept, &expect);
                let mut du: HashMap<&str, usize> = HashMap::new();
                let mut di: HashMap<&str, usize> = HashMap::new();
                for r in &kept {
                    *du.entry(&r.user).or_default() += 1;
                    *di.entry(&r.item).or_default() += 1;
                }
                prop_assert!(du.values().all(|&c| c >= min_user));
                prop_assert!(di.values().all(|&c| c >= min_item));
            }
            Err(_) => prop_assert!(expect.is_empty()),
        }
    }
}

#[test]
fn split_counts_examples_and_enumeration() {
    assert_eq!(split_counts(10, DEFAULT_RATIOS), (7, 1, 2));
    assert_eq!(split_counts(13, DEFAULT_RATIOS), (9, 1, 3));
    for n in 3..=50usize {
        let train = 7 * n / 10;
        let val = ((n + 5) / 10).min(n - train - 1);
        assert_eq!(split_counts(n, DEFAULT_RATIOS), (train, val, n - train - val), "n = {n}");
    }
}

fn user_log(user: &str, n: usize) -> Vec<Interaction> {
    (0..n).map(|k| Interaction::new(user, format!("i{k}"), k as u64)).collect()
}

#[test]
fn split_is_chronological_and_stable() {
    let mut log = vec![
        Interaction::new("u", "late", 9),
        Interaction::new("u", "tie-a", 5),
        Interaction::new("u", "tie-b", 5),
        Interaction::new("u", "early", 1),
    ];
    log.extend((0..6).map(|k| Interaction::new("u", format!("m{k}"), 6)));
    let (split, report) = chronological_split(&log, DEFAULT_RATIOS).unwrap();
    assert_eq!(report.excluded_users, 0);
    let names = |seq: &[usize]| -> Vec<String> {
        seq.iter().map(|&i| split.items.external(i).unwrap().to_string()).collect()
    };
    assert_eq!(names(split.train(1).unwrap()), ["early", "tie-a", "tie-b", "m0", "m1", "m2", "m3"]);
    assert_eq!(names(split.val(1).unwrap()), ["m4"]);
    assert_eq!(names(split.test(1).unwrap()), ["m5", "late"]);
}

#[test]
fn short_users_are_excluded_and_counted() {
    let mut log = user_log("a", 13);
    log.extend(user_log("b", 2));
    log.extend(user_log("c", 3));
    let (split, report) = chronological_split(&log, DEFAULT_RATIOS).unwrap();
    assert_eq!(report.excluded_users, 1);
    assert_eq!(split.n_users(), 2);
    assert_eq!(split.users.internal("b"), None);
    let c = split.users.internal("c").unwrap();
    assert_eq!((split.train(c).unwrap().len(), split.val(c).unwrap().len(), split.test(c).unwrap().len()), (2, 0, 1));
    assert!(chronological_split(&user_log("z", 2), DEFAULT_RATIOS).is_err());
}

proptest! {
    #[test]
    fn split_partitions_every_user(lens in prop::collection::vec(0usize..30, 1..8)) {
        let mut log = Vec::new();
        for (u, &n) in lens.iter().enumerate() {
            for k in 0..n {
                log.push(Interaction::new(format!("u{u}"), format!("i{}", (u * 7 + k) % 11), (k / 2) as u64));
            }
        }
        match chronological_split(&log, DEFAULT_RATIOS) {
            Ok((split, report)) => {
                prop_assert_eq!(report.excluded_users, lens.iter().filter(|&&n| n > 0 && n < 3).count());
                for user in split.user_ids() {
                    let ext = split.users.external(user).unwrap();
                    let original: Vec<&str> = log.iter().filter(|r| r.user == ext).map(|r| r.item.as_str()).collect();
                    let joined: Vec<&str> = split.train(user).unwrap().iter()
                        .chain(split.val(user).unwrap())
                        .chain(split.test(user).unwrap())
                        .map(|&i| split.items.external(i).unwrap())
                        .collect();
                    // Timestamps are non-decreasing in input order here, so
                    // the stable sort leaves the sequence untouched.
                    prop_assert_eq!(joined, original);
                    prop_assert!(!split.test(user).unwrap().is_empty());
                }
                let total: usize = lens.iter().filter(|&&n| n >= 3).sum();
                prop_assert_eq!(split.n_interactions(), total);
            }
            Err(_) => prop_assert!(lens.iter().all(|&n| n < 3)),
        }
    }

    #[test]
    fn vocab_round_trip(ids in prop::collection::hash_set("[a-z]{1,6}", 0..40)) {
        let v = Vocab::from_ids(ids.iter().cloned()).unwrap();
        for id in &ids {
            let k = v.internal(id).unwrap();
            prop_assert!(k >= 1 && k <= v.len());
            prop_assert_eq!(v.external(k).unwrap(), id.as_str());
        }
        for k in 1..=v.len() {
            prop_assert_eq!(v.internal(v.external(k).unwrap()), Some(k));
        }
        prop_assert_eq!(v.external(0), None);
    }
}

#[test]
fn inference_history_examples() {
    let users = Vocab::from_ids(["u1", "u2"]).unwrap();
    let items = Vocab::from_ids(["a", "b", "c", "d", "e"]).unwrap();
    let split = SplitDataset {
        users,
        items,
        train: vec![vec![1, 2, 3], vec![1, 2]],
        val: vec![vec![4], vec![]],
        test: vec![vec![5], vec![3]],
    };
    assert_eq!(inference_history(&split, 1).unwrap(), vec![1, 2, 3, 4]);
    assert_eq!(inference_history(&split, 2).unwrap(), vec![1, 2]);
    assert_eq!(inference_window(&split, 2, 5).unwrap(), vec![0, 0, 0, 1, 2]);
    assert_eq!(inference_window(&split, 1, 3).unwrap(), vec![2, 3, 4]);
    assert!(inference_history(&split, 3).is_err());
    assert!(inference_history(&split, 0).is_err());
    assert_eq!(split.rated(1).unwrap().len(), 4);
}

#[test]
fn bundle_round_trip_and_density() {
    let mut log = user_log("a", 10);
    log.extend(user_log("b", 13));
    log.push(Interaction::new("b", "i0", 100));
    let (split, _) = chronological_split(&log, DEFAULT_RATIOS).unwrap();
    let stats = split.stats();
    assert_eq!(stats.interactions, 24);
    assert_eq!((stats.users, stats.items), (2, 13));
    assert!((stats.density - 24.0 / 26.0).abs() < 1e-15);

    let dir = tempfile::tempdir().unwrap();
    write_bundle(dir.path(), &split).unwrap();
    let back = read_bundle(dir.path()).unwrap();
    assert_eq!(back, split);
    let items = std::fs::read_to_string(dir.path().join("items.txt")).unwrap();
    assert_eq!(items.lines().next(), Some("i0"));
    let stats_text = std::fs::read_to_string(dir.path().join("stats.txt")).unwrap();
    assert!(stats_text.contains("interactions\t24"));

    std::fs::write(dir.path().join("test.txt"), "1\t1 99\n2\t3\n").unwrap();
    assert!(matches!(read_bundle(dir.path()), Err(Error::Parse { line: 1, .. })));
}

#[test]
fn from_sequences_keeps_vocab() {
    let users = Vocab::from_ids(["u1"]).unwrap();
    let items = Vocab::from_ids((0..20).map(|k| format!("i{k}"))).unwrap();
    let split = SplitDataset::from_sequences(users.clone(), items.clone(), &[(1..=10).collect()], DEFAULT_RATIOS).unwrap();
    assert_eq!(split.n_items(), 20);
    assert_eq!(split.train(1).unwrap(), &[1, 2, 3, 4, 5, 6, 7]);
    assert!(SplitDataset::from_sequences(users, items, &[vec![1, 2]], DEFAULT_RATIOS).is_err());
}
