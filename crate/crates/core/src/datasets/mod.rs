//! Interaction logs, activity filtering and chronological splits.

mod bundle;

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use bundle::{read_bundle, write_bundle, DatasetStats};

use crate::error::{Error, Result};
use crate::encoder::{pad_window, PADDING_ID};

pub const MIN_USER_ACTIVITY: usize = 10;
pub const MIN_ITEM_ACTIVITY: usize = 5;
pub const DEFAULT_RATIOS: (f64, f64, f64) = (0.7, 0.1, 0.2);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub timestamp: u64,
    pub rating: Option<f64>,
}

impl Interaction {
    pub fn new(user: impl Into<String>, item: impl Into<String>, timestamp: u64) -> Self {
        Self {
            user: user.into(),
            item: item.into(),
            timestamp,
            rating: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogFormat {
    Tsv,
    Csv,
}

impl LogFormat {
    fn delimiter(self) -> u8 {
        match self {
            LogFormat::Tsv => b'\t',
            LogFormat::Csv => b',',
        }
    }

    /// Guesses from the file extension, defaulting to TSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => LogFormat::Csv,
            _ => LogFormat::Tsv,
        }
    }
}

impl std::str::FromStr for LogFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsv" => Ok(LogFormat::Tsv),
            "csv" => Ok(LogFormat::Csv),
            other => Err(Error::invalid(format!("unknown log format `{other}`"))),
        }
    }
}

/// Reads `user, item, timestamp[, rating]` rows. Rows whose rating is below
/// `rating_threshold` are dropped; rows without a rating are kept.
pub fn load_log(path: &Path, format: LogFormat, rating_threshold: Option<f64>) -> Result<Vec<Interaction>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_log(&text, format, rating_threshold, path)
}

/// [`load_log`] over in-memory text; `origin` only labels errors.
pub fn parse_log(text: &str, format: LogFormat, rating_threshold: Option<f64>, origin: &Path) -> Result<Vec<Interaction>> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(format.delimiter())
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let parse_err = |line: usize, message: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        message,
    };

    let mut out = Vec::new();
    let mut rows = 0usize;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        rows += 1;
        if !(3..=4).contains(&record.len()) {
            return Err(parse_err(line, format!("expected 3 or 4 fields, found {}", record.len())));
        }
        let (user, item) = (&record[0], &record[1]);
        if user.is_empty() || item.is_empty() {
            return Err(parse_err(line, "empty user or item id".into()));
        }
        let timestamp: u64 = record[2]
            .parse()
            .map_err(|_| parse_err(line, format!("timestamp `{}` is not a non-negative integer", &record[2])))?;
        let rating = match record.get(3) {
            Some(r) if !r.is_empty() => {
                let v: f64 = r.parse().map_err(|_| parse_err(line, format!("rating `{r}` is not a number")))?;
                if !v.is_finite() {
                    return Err(parse_err(line, format!("rating `{r}` is not finite")));
                }
                Some(v)
            }
            _ => None,
        };
        if let (Some(t), Some(r)) = (rating_threshold, rating) {
            if r < t {
                continue;
            }
        }
        out.push(Interaction {
            user: user.to_string(),
            item: item.to_string(),
            timestamp,
            rating,
        });
    }
    if rows == 0 {
        return Err(Error::data(format!("{}: log is empty", origin.display())));
    }
    Ok(out)
}

/// Drops users with fewer than 10 and items with fewer than 5 interactions,
/// repeating until nothing changes.
pub fn filter_min_activity(log: Vec<Interaction>) -> Result<Vec<Interaction>> {
    filter_min_activity_with(log, MIN_USER_ACTIVITY, MIN_ITEM_ACTIVITY)
}

pub fn filter_min_activity_with(mut log: Vec<Interaction>, min_user: usize, min_item: usize) -> Result<Vec<Interaction>> {
    loop {
        let mut users: HashMap<&str, usize> = HashMap::new();
        let mut items: HashMap<&str, usize> = HashMap::new();
        for r in &log {
            *users.entry(&r.user).or_default() += 1;
            *items.entry(&r.item).or_default() += 1;
        }
        let keep: Vec<bool> = log
            .iter()
            .map(|r| users[r.user.as_str()] >= min_user && items[r.item.as_str()] >= min_item)
            .collect();
        if keep.iter().all(|&k| k) {
            break;
        }
        let mut flags = keep.into_iter();
        log.retain(|_| flags.next().expect("one flag per row"));
    }
    if log.is_empty() {
        return Err(Error::data("no interactions survive activity filtering"));
    }
    Ok(log)
}

/// Bidirectional map between external ids and dense internal ids starting
/// at 1 (0 is reserved for padding).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocab {
    external: Vec<String>,
    internal: HashMap<String, usize>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_ids<I: IntoIterator<Item = S>, S: Into<String>>(ids: I) -> Result<Self> {
        let mut v = Self::new();
        for id in ids {
            let id = id.into();
            if v.internal.contains_key(&id) {
                return Err(Error::data(format!("duplicate id `{id}` in vocabulary")));
            }
            v.insert(id);
        }
        Ok(v)
    }

    /// Returns the internal id, assigning the next one if `id` is new.
    pub fn insert(&mut self, id: String) -> usize {
        if let Some(&k) = self.internal.get(&id) {
            return k;
        }
        self.external.push(id.clone());
        let k = self.external.len();
        self.internal.insert(id, k);
        k
    }

    pub fn internal(&self, external: &str) -> Option<usize> {
        self.internal.get(external).copied()
    }

    pub fn external(&self, internal: usize) -> Option<&str> {
        internal
            .checked_sub(1)
            .and_then(|k| self.external.get(k))
            .map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.external.len()
    }

    pub fn is_empty(&self) -> bool {
        self.external.is_empty()
    }

    /// External ids in internal-id order.
    pub fn ids(&self) -> &[String] {
        &self.external
    }
}

/// Per-user chronological train/validation/test sequences.
///
/// Users have internal ids `1..=n_users()`; the sequence accessors take that
/// id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitDataset {
    pub users: Vocab,
    pub items: Vocab,
    pub train: Vec<Vec<usize>>,
    pub val: Vec<Vec<usize>>,
    pub test: Vec<Vec<usize>>,
}

/// Side information from [`chronological_split`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SplitReport {
    /// Users with fewer than three interactions, left out of the split.
    pub excluded_users: usize,
}

/// `(train, val, test)` sizes for a sequence of length `n`: train is the
/// floor of its share, validation is rounded to nearest, test gets the rest
/// and always at least one item.
pub fn split_counts(n: usize, ratios: (f64, f64, f64)) -> (usize, usize, usize) {
    // The epsilon keeps products such as 0.7·30 from landing just below an
    // integer.
    let n_train = ((ratios.0 * n as f64) + 1e-9).floor() as usize;
    let n_train = n_train.min(n.saturating_sub(1));
    let n_val = (ratios.1 * n as f64).round() as usize;
    let n_val = n_val.min(n - n_train - 1);
    (n_train, n_val, n - n_train - n_val)
}

fn check_ratios(ratios: (f64, f64, f64)) -> Result<()> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(0.0..=1.0).contains(r)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split ratios {ratios:?} must be in [0,1] and sum to 1")));
    }
    Ok(())
}

/// Sorts each user's interactions by timestamp (stable, so ties keep input
/// order) and cuts them into train/validation/test.
pub fn chronological_split(log: &[Interaction], ratios: (f64, f64, f64)) -> Result<(SplitDataset, SplitReport)> {
    check_ratios(ratios)?;
    let mut order: Vec<&str> = Vec::new();
    let mut per_user: HashMap<&str, Vec<&Interaction>> = HashMap::new();
    for r in log {
        per_user
            .entry(&r.user)
            .or_insert_with(|| {
                order.push(&r.user);
                Vec::new()
            })
            .push(r);
    }
    let mut report = SplitReport::default();
    let mut users = Vocab::new();
    let mut items = Vocab::new();
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for user in order {
        let mut rows = per_user.remove(user).expect("user collected");
        if rows.len() < 3 {
            report.excluded_users += 1;
            continue;
        }
        rows.sort_by_key(|r| r.timestamp);
        users.insert(user.to_string());
        let seq: Vec<usize> = rows.iter().map(|r| items.insert(r.item.clone())).collect();
        let (a, b, _) = split_counts(seq.len(), ratios);
        train.push(seq[..a].to_vec());
        val.push(seq[a..a + b].to_vec());
        test.push(seq[a + b..].to_vec());
    }
    if report.excluded_users > 0 {
        log::warn!("{} users with fewer than 3 interactions excluded from the split", report.excluded_users);
    }
    if users.is_empty() {
        return Err(Error::data("no user has enough interactions to split"));
    }
    Ok((
        SplitDataset {
            users,
            items,
            train,
            val,
            test,
        },
        report,
    ))
}

impl SplitDataset {
    /// Splits ready-made internal-id sequences (one per user, in time order)
    /// without touching the vocabularies.
    pub fn from_sequences(users: Vocab, items: Vocab, sequences: &[Vec<usize>], ratios: (f64, f64, f64)) -> Result<Self> {
        check_ratios(ratios)?;
        if sequences.len() != users.len() {
            return Err(Error::data(format!("{} sequences for {} users", sequences.len(), users.len())));
        }
        let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
        for (u, seq) in sequences.iter().enumerate() {
            if seq.len() < 3 {
                return Err(Error::data(format!("user {} has fewer than 3 interactions", u + 1)));
            }
            if let Some(&bad) = seq.iter().find(|&&i| i == PADDING_ID || i > items.len()) {
                return Err(Error::data(format!("item id {bad} out of range")));
            }
            let (a, b, _) = split_counts(seq.len(), ratios);
            train.push(seq[..a].to_vec());
            val.push(seq[a..a + b].to_vec());
            test.push(seq[a + b..].to_vec());
        }
        let out = Self {
            users,
            items,
            train,
            val,
            test,
        };
        Ok(out)
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    fn index(&self, user: usize) -> Result<usize> {
        if user == 0 || user > self.n_users() {
            return Err(Error::invalid(format!("unknown user id {user}")));
        }
        Ok(user - 1)
    }

    pub fn train(&self, user: usize) -> Result<&[usize]> {
        Ok(&self.train[self.index(user)?])
    }

    pub fn val(&self, user: usize) -> Result<&[usize]> {
        Ok(&self.val[self.index(user)?])
    }

    pub fn test(&self, user: usize) -> Result<&[usize]> {
        Ok(&self.test[self.index(user)?])
    }

    /// Items the user has rated before test time (train ∪ validation).
    pub fn rated(&self, user: usize) -> Result<HashSet<usize>> {
        let k = self.index(user)?;
        Ok(self.train[k].iter().chain(&self.val[k]).copied().collect())
    }

    pub fn n_interactions(&self) -> usize {
        self.train.iter().chain(&self.val).chain(&self.test).map(Vec::len).sum()
    }

    pub fn user_ids(&self) -> impl Iterator<Item = usize> {
        1..=self.n_users()
    }

    /// Interactions per (users × items).
    pub fn density(&self) -> f64 {
        self.n_interactions() as f64 / (self.n_users() as f64 * self.n_items() as f64)
    }

    pub fn stats(&self) -> DatasetStats {
        DatasetStats {
            interactions: self.n_interactions(),
            users: self.n_users(),
            items: self.n_items(),
            density: self.density(),
        }
    }
}

/// Train items followed by validation items: the sequence the encoder sees
/// at test time.
pub fn inference_history(split: &SplitDataset, user: usize) -> Result<Vec<usize>> {
    let mut h = split.train(user)?.to_vec();
    h.extend_from_slice(split.val(user)?);
    Ok(h)
}

/// The last `window` history items, left-padded with the padding id.
pub fn inference_window(split: &SplitDataset, user: usize, window: usize) -> Result<Vec<usize>> {
    Ok(pad_window(&inference_history(split, user)?, window))
}

#[cfg(test)]
mod tests;
