//! Brute-force references that share no code with the closed forms.

use crate::error::{Error, Result};
use crate::geometry::Hypercuboid;

pub const MAX_GRID_DIM: usize = 5;
pub const MIN_GRID_RESOLUTION: usize = 50;

/// Searches a regular grid over the closed box (`resolution` points per axis,
/// corners included) for the point closest to `item`. An item lying inside
/// the box is its own candidate, so interior items get distance 0 exactly.
///
/// Returns the best point and its squared distance to `item`.
pub fn grid_nearest_point_oracle(
    b: &Hypercuboid<f64>,
    item: &[f64],
    resolution: usize,
) -> Result<(Vec<f64>, f64)> {
    let d = b.dim();
    if d > MAX_GRID_DIM {
        return Err(Error::invalid(format!(
            "grid oracle supports at most {MAX_GRID_DIM} dims, got {d}"
        )));
    }
    if resolution < MIN_GRID_RESOLUTION {
        return Err(Error::invalid(format!(
            "grid resolution must be at least {MIN_GRID_RESOLUTION}, got {resolution}"
        )));
    }
    if item.len() != d {
        return Err(Error::invalid("item dimension does not match the box"));
    }

    let lower: Vec<f64> = (0..d).map(|j| b.center()[j] - b.offset()[j]).collect();
    let upper: Vec<f64> = (0..d).map(|j| b.center()[j] + b.offset()[j]).collect();
    if (0..d).all(|j| lower[j] <= item[j] && item[j] <= upper[j]) {
        return Ok((item.to_vec(), 0.0));
    }

    let axes: Vec<Vec<f64>> = (0..d)
        .map(|j| {
            if b.offset()[j] == 0.0 {
                return vec![b.center()[j]];
            }
            (0..resolution)
                .map(|k| {
                    if k + 1 == resolution {
                        upper[j]
                    } else {
                        lower[j] + (upper[j] - lower[j]) * k as f64 / (resolution - 1) as f64
                    }
                })
                .collect()
        })
        .collect();
    // Per-axis squared gaps, so the inner loop is additions only.
    let gaps: Vec<Vec<f64>> = axes
        .iter()
        .enumerate()
        .map(|(j, ax)| ax.iter().map(|q| (q - item[j]) * (q - item[j])).collect())
        .collect();

    let mut idx = vec![0usize; d];
    let mut best = f64::INFINITY;
    let mut best_idx = idx.clone();
    loop {
        let dist: f64 = (0..d).map(|j| gaps[j][idx[j]]).sum();
        if dist < best {
            best = dist;
            best_idx.copy_from_slice(&idx);
        }
        let mut j = 0;
        loop {
            if j == d {
                let point = (0..d).map(|j| axes[j][best_idx[j]]).collect();
                return Ok((point, best));
            }
            idx[j] += 1;
            if idx[j] < axes[j].len() {
                break;
            }
            idx[j] = 0;
            j += 1;
        }
    }
}

/// Worst-case Euclidean gap between the true nearest point and the nearest
/// grid point: half a grid cell diagonal.
pub fn grid_tolerance(b: &Hypercuboid<f64>, resolution: usize) -> f64 {
    let cell: f64 = b
        .offset()
        .iter()
        .map(|f| {
            let h = 2.0 * f / (resolution - 1) as f64;
            h * h
        })
        .sum();
    0.5 * cell.sqrt() + 1e-12
}
