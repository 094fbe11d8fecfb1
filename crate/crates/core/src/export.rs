//! Text exports of item embeddings and user boxes, with optional PCA.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::datasets::{inference_window, SplitDataset};
use crate::encoder::Model;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// A principal-component basis fitted to a set of rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `D` orthonormal rows of length `d`, by decreasing variance.
    pub components: Vec<Vec<f64>>,
    /// Variance along each component.
    pub variances: Vec<f64>,
}

impl Pca {
    pub fn fit(rows: &[Vec<f64>], dims: usize) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::invalid("PCA needs at least one row"));
        };
        let d = first.len();
        if dims == 0 || dims > d {
            return Err(Error::invalid(format!("PCA dimension must be in 1..={d}, got {dims}")));
        }
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::invalid("PCA rows differ in length"));
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, x) in mean.iter_mut().zip(r) {
                *m += x / n;
            }
        }
        let centered = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j] - mean[j]);
        let cov = centered.transpose() * &centered / n;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let mut components = Vec::with_capacity(dims);
        let mut variances = Vec::with_capacity(dims);
        for &k in order.iter().take(dims) {
            let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            // Fix the sign so the largest-magnitude entry is positive.
            let lead = v.iter().copied().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
            if lead < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            components.push(v);
            variances.push(eig.eigenvalues[k].max(0.0));
        }
        Ok(Self {
            mean,
            components,
            variances,
        })
    }

    pub fn project(&self, row: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(row).zip(&self.mean).map(|((w, x), m)| w * (x - m)).sum())
            .collect()
    }

    /// Half-extents of the smallest box in the new basis that contains a box
    /// with per-axis half-extents `offset`.
    pub fn project_offset(&self, offset: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(offset).map(|(w, f)| w.abs() * f).sum())
            .collect()
    }
}

/// One exported user box.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxRow {
    pub user: String,
    pub index: usize,
    pub center: Vec<f64>,
    pub offset: Vec<f64>,
}

fn to_f64<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

/// `(item id, embedding)` for every real item, in id order.
pub fn item_rows<T: Real>(model: &Model<T>) -> Vec<(usize, Vec<f64>)> {
    (1..=model.n_items()).map(|i| (i, to_f64(model.item(i)))).collect()
}

/// Every user's boxes, encoded from their inference window.
pub fn box_rows<T: Real>(model: &Model<T>, split: &SplitDataset) -> Result<Vec<BoxRow>> {
    if split.n_items() != model.n_items() {
        return Err(Error::data(format!(
            "dataset has {} items, model has {}",
            split.n_items(),
            model.n_items()
        )));
    }
    let mut out = Vec::new();
    for u in split.user_ids() {
        let window = inference_window(split, u, model.config.window)?;
        let set = model.encode_user(&window)?;
        for (j, b) in set.boxes().iter().enumerate() {
            out.push(BoxRow {
                user: split.users.external(u).unwrap_or_default().to_string(),
                index: j,
                center: to_f64(b.center()),
                offset: to_f64(b.offset()),
            });
        }
    }
    Ok(out)
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.9}")).collect::<Vec<_>>().join(" ")
}

/// `item<TAB>values`, optionally projected.
pub fn format_items(rows: &[(String, Vec<f64>)], pca: Option<&Pca>) -> String {
    let mut s = String::new();
    for (id, v) in rows {
        let v = pca.map_or_else(|| v.clone(), |p| p.project(v));
        let _ = writeln!(s, "{id}\t{}", join(&v));
    }
    s
}

/// `user<TAB>box<TAB>center<TAB>offset`, optionally projected.
pub fn format_boxes(rows: &[BoxRow], pca: Option<&Pca>) -> String {
    let mut s = String::new();
    for r in rows {
        let (c, f) = match pca {
            Some(p) => (p.project(&r.center), p.project_offset(&r.offset)),
            None => (r.center.clone(), r.offset.clone()),
        };
        let _ = writeln!(s, "{}\t{}\t{}\t{}", r.user, r.index, join(&c), join(&f));
    }
    s
}
