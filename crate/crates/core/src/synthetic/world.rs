use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{write_bundle, Interaction, SplitDataset, Vocab, DEFAULT_RATIOS};
use crate::error::{Error, Result};
use crate::geometry::{contains, Hypercuboid};

const MAX_RETRIES: usize = 200;

/// Parameters of a box world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub n_users: usize,
    pub n_items: usize,
    /// Latent dimension `d₀`.
    pub d0: usize,
    pub boxes_per_user: usize,
    /// Fraction of each user's positives drawn from outside their boxes.
    pub noise: f64,
    pub seed: u64,
    /// Centers are uniform in `[-center_range, center_range]^d₀`.
    pub center_range: f64,
    /// Per-axis offsets are uniform in this interval.
    pub offset_range: (f64, f64),
    /// Users with fewer in-box items than this are redrawn.
    pub min_positives: usize,
    /// Probability of moving to another box after each interaction.
    pub switch_prob: f64,
}

impl WorldSpec {
    /// Defaults sized so that a user owns roughly 8–10% of the items.
    pub fn new(n_users: usize, n_items: usize, d0: usize, boxes_per_user: usize, noise: f64, seed: u64) -> Self {
        let offset_range = if boxes_per_user > 1 { (0.3, 0.5) } else { (0.4, 0.7) };
        Self {
            n_users,
            n_items,
            d0,
            boxes_per_user,
            noise,
            seed,
            center_range: 0.6,
            offset_range,
            min_positives: 10,
            switch_prob: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_items < 50 || self.d0 < 2 {
            return Err(Error::invalid("a box world needs at least 50 items and 2 dimensions"));
        }
        if self.n_users == 0 || self.boxes_per_user == 0 {
            return Err(Error::invalid("a box world needs users and boxes"));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return Err(Error::invalid("noise must be in [0, 1)"));
        }
        let (lo, hi) = self.offset_range;
        if !(0.0 <= lo && lo <= hi) || !(self.center_range >= 0.0) {
            return Err(Error::invalid("bad offset or center range"));
        }
        Ok(())
    }
}

/// Ground truth plus the generated interaction sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxWorld {
    pub spec: WorldSpec,
    /// Row `i - 1` holds item `i`.
    pub item_features: Vec<Vec<f64>>,
    pub true_boxes: Vec<Vec<Hypercuboid<f64>>>,
    /// Item ids (1-based) in interaction order, one list per user.
    pub sequences: Vec<Vec<usize>>,
}

fn disjoint(a: &Hypercuboid<f64>, b: &Hypercuboid<f64>) -> bool {
    (0..a.dim()).any(|j| (a.center()[j] - b.center()[j]).abs() > a.offset()[j] + b.offset()[j])
}

/// Builds a world: items uniform in `[-1, 1]^d₀`, users owning random boxes,
/// and each user interacting with every item inside their boxes. The order
/// is a random walk over the user's boxes (staying with probability
/// `1 - switch_prob`), drawing the next unvisited item of the current box at
/// random. `noise` random outside items are inserted at random positions.
pub fn generate_box_world(spec: &WorldSpec) -> Result<BoxWorld> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let item_features: Vec<Vec<f64>> = (0..spec.n_items)
        .map(|_| (0..spec.d0).map(|_| rng.gen_range(-1.0..=1.0)).collect())
        .collect();
    let (lo, hi) = spec.offset_range;
    let min_per_box = (spec.min_positives / spec.boxes_per_user).max(2);
    let mut true_boxes = Vec::with_capacity(spec.n_users);
    let mut sequences = Vec::with_capacity(spec.n_users);
    for user in 0..spec.n_users {
        let mut found = None;
        for _ in 0..MAX_RETRIES {
            let mut boxes: Vec<Hypercuboid<f64>> = Vec::new();
            for _ in 0..MAX_RETRIES * spec.boxes_per_user {
                if boxes.len() == spec.boxes_per_user {
                    break;
                }
                let c = (0..spec.d0).map(|_| rng.gen_range(-spec.center_range..=spec.center_range)).collect();
                let f = (0..spec.d0).map(|_| rng.gen_range(lo..=hi)).collect();
                let b = Hypercuboid::new(c, f)?;
                if boxes.iter().all(|o| disjoint(o, &b)) {
                    boxes.push(b);
                }
            }
            if boxes.len() < spec.boxes_per_user {
                continue;
            }
            let members: Vec<Vec<usize>> = boxes
                .iter()
                .map(|b| {
                    (1..=spec.n_items)
                        .filter(|&i| contains(b, &item_features[i - 1]).expect("same dim"))
                        .collect()
                })
                .collect();
            let total: usize = members.iter().map(Vec::len).sum();
            if total >= spec.min_positives && members.iter().all(|m| m.len() >= min_per_box) {
                found = Some((boxes, members));
                break;
            }
        }
        let Some((boxes, members)) = found else {
            return Err(Error::data(format!("user {}: no disjoint boxes with enough items after {MAX_RETRIES} draws", user + 1)));
        };

        let mut walks: Vec<std::collections::VecDeque<usize>> = members
            .iter()
            .map(|m| {
                let mut order = m.clone();
                order.shuffle(&mut rng);
                order.into()
            })
            .collect();
        let mut seq = Vec::new();
        let mut current = rng.gen_range(0..walks.len());
        while walks.iter().any(|w| !w.is_empty()) {
            if walks[current].is_empty() || (walks.len() > 1 && rng.gen_bool(spec.switch_prob)) {
                let open: Vec<usize> = (0..walks.len()).filter(|&j| !walks[j].is_empty() && j != current).collect();
                if let Some(&j) = open.choose(&mut rng) {
                    current = j;
                }
            }
            seq.push(walks[current].pop_front().expect("box has items left"));
        }

        let in_box: HashSet<usize> = seq.iter().copied().collect();
        let n_noise = (seq.len() as f64 * spec.noise / (1.0 - spec.noise)).round() as usize;
        let outside: Vec<usize> = (1..=spec.n_items).filter(|i| !in_box.contains(i)).collect();
        for &i in outside.choose_multiple(&mut rng, n_noise.min(outside.len())) {
            let at = rng.gen_range(0..=seq.len());
            seq.insert(at, i);
        }
        true_boxes.push(boxes);
        sequences.push(seq);
    }
    Ok(BoxWorld {
        spec: spec.clone(),
        item_features,
        true_boxes,
        sequences,
    })
}

pub fn user_external_id(user: usize) -> String {
    format!("u{user}")
}

pub fn item_external_id(item: usize) -> String {
    format!("i{item}")
}

impl BoxWorld {
    pub fn n_users(&self) -> usize {
        self.sequences.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_features.len()
    }

    /// Index of the first true box of `user` containing `item`.
    pub fn box_label(&self, user: usize, item: usize) -> Option<usize> {
        let f = &self.item_features[item - 1];
        self.true_boxes[user - 1]
            .iter()
            .position(|b| contains(b, f).expect("same dim"))
    }

    pub fn in_box(&self, user: usize, item: usize) -> bool {
        self.box_label(user, item).is_some()
    }

    /// The world as a timestamped log (timestamp = position in sequence).
    pub fn log(&self) -> Vec<Interaction> {
        let mut out = Vec::new();
        for (u, seq) in self.sequences.iter().enumerate() {
            for (t, &i) in seq.iter().enumerate() {
                out.push(Interaction::new(user_external_id(u + 1), item_external_id(i), t as u64));
            }
        }
        out
    }

    /// Chronological split over the full item vocabulary, so internal ids
    /// equal world item ids.
    pub fn split(&self) -> Result<SplitDataset> {
        let users = Vocab::from_ids((1..=self.n_users()).map(user_external_id))?;
        let items = Vocab::from_ids((1..=self.n_items()).map(item_external_id))?;
        SplitDataset::from_sequences(users, items, &self.sequences, DEFAULT_RATIOS)
    }

    /// `user<TAB>box<TAB>centers<TAB>offsets`, space-separated vectors.
    pub fn truth_tsv(&self) -> String {
        let mut s = String::new();
        for (u, boxes) in self.true_boxes.iter().enumerate() {
            for (j, b) in boxes.iter().enumerate() {
                let join = |v: &[f64]| v.iter().map(|x| format!("{x:.9}")).collect::<Vec<_>>().join(" ");
                let _ = writeln!(s, "{}\t{j}\t{}\t{}", user_external_id(u + 1), join(b.center()), join(b.offset()));
            }
        }
        s
    }

    /// `item<TAB>features`.
    pub fn item_features_tsv(&self) -> String {
        let mut s = String::new();
        for (i, f) in self.item_features.iter().enumerate() {
            let v: Vec<String> = f.iter().map(|x| format!("{x:.9}")).collect();
            let _ = writeln!(s, "{}\t{}", item_external_id(i + 1), v.join(" "));
        }
        s
    }

    /// Writes `log.tsv`, `truth.tsv`, `item_features.tsv` and a dataset
    /// bundle under `bundle/`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut log = String::new();
        for r in self.log() {
            let _ = writeln!(log, "{}\t{}\t{}", r.user, r.item, r.timestamp);
        }
        for (name, text) in [
            ("log.tsv", log),
            ("truth.tsv", self.truth_tsv()),
            ("item_features.tsv", self.item_features_tsv()),
        ] {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        write_bundle(&dir.join("bundle"), &self.split()?)
    }
}
