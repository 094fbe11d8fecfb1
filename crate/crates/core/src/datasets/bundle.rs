//! On-disk dataset bundle.
//!
//! ```text
//! users.txt   external user id per line (line k holds internal id k+1)
//! items.txt   external item id per line
//! train.txt   "<user id>\t<item id> <item id> ..." per user
//! val.txt
//! test.txt
//! stats.txt   interactions / users / items / density
//! ```

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{SplitDataset, Vocab};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub interactions: usize,
    pub users: usize,
    pub items: usize,
    pub density: f64,
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "interactions\t{}", self.interactions)?;
        writeln!(f, "users\t{}", self.users)?;
        writeln!(f, "items\t{}", self.items)?;
        writeln!(f, "density\t{:.6}%", self.density * 100.0)
    }
}

fn write_vocab(path: &Path, v: &Vocab) -> Result<()> {
    let mut s = String::new();
    for id in v.ids() {
        s.push_str(id);
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn write_split(path: &Path, seqs: &[Vec<usize>]) -> Result<()> {
    let mut s = String::new();
    for (k, seq) in seqs.iter().enumerate() {
        s.push_str(&(k + 1).to_string());
        s.push('\t');
        let items: Vec<String> = seq.iter().map(usize::to_string).collect();
        s.push_str(&items.join(" "));
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn write_bundle(dir: &Path, split: &SplitDataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_vocab(&dir.join("users.txt"), &split.users)?;
    write_vocab(&dir.join("items.txt"), &split.items)?;
    write_split(&dir.join("train.txt"), &split.train)?;
    write_split(&dir.join("val.txt"), &split.val)?;
    write_split(&dir.join("test.txt"), &split.test)?;
    let stats = dir.join("stats.txt");
    fs::write(&stats, split.stats().to_string()).map_err(|e| Error::io(&stats, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn read_vocab(path: &Path) -> Result<Vocab> {
    let text = read_text(path)?;
    Vocab::from_ids(text.lines().filter(|l| !l.is_empty()))
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

fn read_split(path: &Path, n_users: usize, n_items: usize) -> Result<Vec<Vec<usize>>> {
    let text = read_text(path)?;
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut out = vec![None; n_users];
    for (k, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (user, items) = line.split_once('\t').unwrap_or((line, ""));
        let user: usize = user
            .parse()
            .map_err(|_| err(k + 1, format!("bad user id `{user}`")))?;
        if user == 0 || user > n_users {
            return Err(err(k + 1, format!("user id {user} out of range")));
        }
        let seq = items
            .split_whitespace()
            .map(|t| match t.parse::<usize>() {
                Ok(i) if (1..=n_items).contains(&i) => Ok(i),
                _ => Err(err(k + 1, format!("bad item id `{t}`"))),
            })
            .collect::<Result<Vec<_>>>()?;
        if out[user - 1].replace(seq).is_some() {
            return Err(err(k + 1, format!("user {user} listed twice")));
        }
    }
    out.into_iter()
        .enumerate()
        .map(|(k, s)| s.ok_or_else(|| Error::data(format!("{}: user {} missing", path.display(), k + 1))))
        .collect()
}

pub fn read_bundle(dir: &Path) -> Result<SplitDataset> {
    let users = read_vocab(&dir.join("users.txt"))?;
    let items = read_vocab(&dir.join("items.txt"))?;
    let (nu, ni) = (users.len(), items.len());
    Ok(SplitDataset {
        train: read_split(&dir.join("train.txt"), nu, ni)?,
        val: read_split(&dir.join("val.txt"), nu, ni)?,
        test: read_split(&dir.join("test.txt"), nu, ni)?,
        users,
        items,
    })
}
