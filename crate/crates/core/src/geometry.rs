//! Axis-aligned hypercuboids and the point-to-box distances used for scoring.
//!
//! A user is a box `[center - offset, center + offset]`; an item is a point.
//! Smaller distances mean stronger preference. Everything here is a pure
//! closed-form function, kept independent of the autodiff engine so it can
//! serve as the reference for the differentiable versions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Hypercuboid<T> {
    center: Vec<T>,
    offset: Vec<T>,
}

impl<T: Real> Hypercuboid<T> {
    pub fn new(center: Vec<T>, offset: Vec<T>) -> Result<Self> {
        if center.len() != offset.len() {
            return Err(Error::invalid(format!(
                "center has {} dims but offset has {}",
                center.len(),
                offset.len()
            )));
        }
        if center.is_empty() {
            return Err(Error::invalid("hypercuboid needs at least one dimension"));
        }
        if let Some(j) = offset.iter().position(|f| !(*f >= T::zero())) {
            return Err(Error::invalid(format!(
                "offset[{j}] = {} is negative or NaN",
                offset[j]
            )));
        }
        Ok(Self { center, offset })
    }

    /// Zero-offset box collapsed onto `center`.
    pub fn point(center: Vec<T>) -> Self {
        let offset = vec![T::zero(); center.len()];
        Self { center, offset }
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn center(&self) -> &[T] {
        &self.center
    }

    pub fn offset(&self) -> &[T] {
        &self.offset
    }

    pub fn lower(&self) -> Vec<T> {
        self.center
            .iter()
            .zip(&self.offset)
            .map(|(c, f)| *c - *f)
            .collect()
    }

    pub fn upper(&self) -> Vec<T> {
        self.center
            .iter()
            .zip(&self.offset)
            .map(|(c, f)| *c + *f)
            .collect()
    }

    /// Squared half-diagonal, `‖offset‖²`.
    pub fn offset_sq_norm(&self) -> T {
        self.offset.iter().map(|f| *f * *f).sum()
    }

    fn check_dim(&self, item: &[T]) -> Result<()> {
        if item.len() != self.dim() {
            return Err(Error::invalid(format!(
                "item has {} dims, box has {}",
                item.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// `(outside, inside)` squared distances in one pass, no dimension check.
    pub(crate) fn parts_unchecked(&self, item: &[T]) -> (T, T) {
        let mut outside = T::zero();
        let mut inside = T::zero();
        for ((&c, &f), &v) in self.center.iter().zip(&self.offset).zip(item) {
            let p = clamp_to(v, c - f, c + f);
            let o = p - v;
            let i = p - c;
            outside = outside + o * o;
            inside = inside + i * i;
        }
        (outside, inside)
    }
}

#[inline]
fn clamp_to<T: Real>(v: T, lo: T, hi: T) -> T {
    // min(upper, max(lower, v))
    let m = if v > lo { v } else { lo };
    if m < hi {
        m
    } else {
        hi
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceParams {
    pub gamma: f64,
    pub alpha: f64,
    pub use_additional: bool,
}

impl Default for DistanceParams {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            alpha: 200.0,
            use_additional: false,
        }
    }
}

impl DistanceParams {
    pub fn new(gamma: f64, alpha: f64, use_additional: bool) -> Result<Self> {
        let params = Self {
            gamma,
            alpha,
            use_additional,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::invalid(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if self.use_additional && !(self.alpha > 100.0) {
            return Err(Error::invalid(format!(
                "alpha must exceed 100 when the additional distance is enabled, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

pub fn contains<T: Real>(b: &Hypercuboid<T>, item: &[T]) -> Result<bool> {
    b.check_dim(item)?;
    Ok(b
        .center
        .iter()
        .zip(&b.offset)
        .zip(item)
        .all(|((&c, &f), &v)| c - f <= v && v <= c + f))
}

/// Projection of `item` onto the closed box: `min(upper, max(lower, item))`.
pub fn nearest_surface_point<T: Real>(b: &Hypercuboid<T>, item: &[T]) -> Result<Vec<T>> {
    b.check_dim(item)?;
    Ok(b.center
        .iter()
        .zip(&b.offset)
        .zip(item)
        .map(|((&c, &f), &v)| clamp_to(v, c - f, c + f))
        .collect())
}

pub fn outside_distance<T: Real>(b: &Hypercuboid<T>, item: &[T]) -> Result<T> {
    b.check_dim(item)?;
    Ok(b.parts_unchecked(item).0)
}

pub fn inside_distance<T: Real>(b: &Hypercuboid<T>, item: &[T]) -> Result<T> {
    b.check_dim(item)?;
    Ok(b.parts_unchecked(item).1)
}

/// `2·(σ(α·ℓ_out) − ½)·‖offset‖²`, zero on the closed box.
pub fn additional_distance<T: Real>(b: &Hypercuboid<T>, item: &[T], alpha: f64) -> Result<T> {
    if !(alpha > 0.0) {
        return Err(Error::invalid(format!("alpha must be positive, got {alpha}")));
    }
    b.check_dim(item)?;
    let (outside, _) = b.parts_unchecked(item);
    Ok(additional_from_parts(outside, b.offset_sq_norm(), alpha))
}

#[inline]
fn additional_from_parts<T: Real>(outside: T, offset_sq: T, alpha: f64) -> T {
    // 2σ(x) − 1 = tanh(x / 2), which stays accurate for large x.
    (T::lit(alpha * 0.5) * outside).tanh() * offset_sq
}

/// `ℓ_out + γ·ℓ_in`, plus the additional term when enabled.
pub fn composite_distance<T: Real>(
    b: &Hypercuboid<T>,
    item: &[T],
    params: &DistanceParams,
) -> Result<T> {
    b.check_dim(item)?;
    Ok(composite_unchecked(b, item, params))
}

#[inline]
fn composite_unchecked<T: Real>(b: &Hypercuboid<T>, item: &[T], params: &DistanceParams) -> T {
    let (outside, inside) = b.parts_unchecked(item);
    let mut d = outside + T::lit(params.gamma) * inside;
    if params.use_additional {
        d = d + additional_from_parts(outside, b.offset_sq_norm(), params.alpha);
    }
    d
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoxMode {
    Single,
    Concentric,
    Independent,
}

impl BoxMode {
    pub fn tag(self) -> u32 {
        match self {
            BoxMode::Single => 0,
            BoxMode::Concentric => 1,
            BoxMode::Independent => 2,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            0 => Some(BoxMode::Single),
            1 => Some(BoxMode::Concentric),
            2 => Some(BoxMode::Independent),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BoxMode::Single => "single",
            BoxMode::Concentric => "concentric",
            BoxMode::Independent => "independent",
        }
    }
}

impl std::str::FromStr for BoxMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(BoxMode::Single),
            "concentric" => Ok(BoxMode::Concentric),
            "independent" => Ok(BoxMode::Independent),
            other => Err(Error::invalid(format!("unknown box mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for BoxMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One user's boxes together with the rule combining them.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSet<T> {
    mode: BoxMode,
    boxes: Vec<Hypercuboid<T>>,
}

impl<T: Real> BoxSet<T> {
    pub fn new(mode: BoxMode, boxes: Vec<Hypercuboid<T>>) -> Result<Self> {
        let Some(first) = boxes.first() else {
            return Err(Error::invalid("a box set needs at least one box"));
        };
        if boxes.iter().any(|b| b.dim() != first.dim()) {
            return Err(Error::invalid("boxes in a set must share a dimension"));
        }
        match mode {
            BoxMode::Single if boxes.len() != 1 => {
                return Err(Error::invalid(format!(
                    "single mode takes exactly one box, got {}",
                    boxes.len()
                )))
            }
            BoxMode::Concentric if boxes.iter().any(|b| b.center != first.center) => {
                return Err(Error::invalid("concentric boxes must share one center"))
            }
            _ => {}
        }
        Ok(Self { mode, boxes })
    }

    pub fn single(b: Hypercuboid<T>) -> Self {
        Self {
            mode: BoxMode::Single,
            boxes: vec![b],
        }
    }

    pub fn mode(&self) -> BoxMode {
        self.mode
    }

    pub fn boxes(&self) -> &[Hypercuboid<T>] {
        &self.boxes
    }

    pub fn dim(&self) -> usize {
        self.boxes[0].dim()
    }

    /// Same boxes with every offset zeroed.
    pub fn collapsed(&self) -> Self {
        Self {
            mode: self.mode,
            boxes: self
                .boxes
                .iter()
                .map(|b| Hypercuboid::point(b.center.clone()))
                .collect(),
        }
    }

    pub fn distance(&self, item: &[T], params: &DistanceParams) -> Result<T> {
        if item.len() != self.dim() {
            return Err(Error::invalid(format!(
                "item has {} dims, boxes have {}",
                item.len(),
                self.dim()
            )));
        }
        Ok(self.distance_unchecked(item, params))
    }

    /// Distances to every `dim`-wide row of `rows` (row-major). Bounds are
    /// computed once per box, with the same arithmetic as
    /// [`BoxSet::distance`], so the results agree bit for bit.
    pub fn distances_to_rows(&self, rows: &[T], params: &DistanceParams) -> Result<Vec<T>> {
        let d = self.dim();
        if rows.len() % d != 0 {
            return Err(Error::invalid(format!(
                "row buffer of length {} is not a multiple of {d}",
                rows.len()
            )));
        }
        let bounds: Vec<(Vec<T>, Vec<T>, T)> = self
            .boxes
            .iter()
            .map(|b| {
                let lo = b.center.iter().zip(&b.offset).map(|(&c, &f)| c - f).collect();
                let hi = b.center.iter().zip(&b.offset).map(|(&c, &f)| c + f).collect();
                (lo, hi, b.offset_sq_norm())
            })
            .collect();
        let gamma = T::lit(params.gamma);
        let mut out = Vec::with_capacity(rows.len() / d);
        for item in rows.chunks_exact(d) {
            let mut outside_sum = T::zero();
            let mut inside_min = T::infinity();
            let mut best = T::infinity();
            let mut additional = T::zero();
            for (b, (lo, hi, offset_sq)) in self.boxes.iter().zip(&bounds) {
                let mut outside = T::zero();
                let mut inside = T::zero();
                for j in 0..d {
                    let p = clamp_to(item[j], lo[j], hi[j]);
                    let o = p - item[j];
                    let i = p - b.center[j];
                    outside = outside + o * o;
                    inside = inside + i * i;
                }
                outside_sum = outside_sum + outside;
                if inside < inside_min {
                    inside_min = inside;
                }
                let composite = outside + gamma * inside;
                if composite < best {
                    best = composite;
                }
                if params.use_additional {
                    additional = additional.max(additional_from_parts(outside, *offset_sq, params.alpha));
                }
            }
            out.push(match self.mode {
                BoxMode::Single => best + additional,
                BoxMode::Concentric => outside_sum + gamma * inside_min + additional,
                BoxMode::Independent => best + additional,
            });
        }
        Ok(out)
    }

    pub(crate) fn distance_unchecked(&self, item: &[T], params: &DistanceParams) -> T {
        match self.mode {
            BoxMode::Single => composite_unchecked(&self.boxes[0], item, params),
            BoxMode::Concentric => concentric_unchecked(&self.boxes, item, params),
            BoxMode::Independent => independent_unchecked(&self.boxes, item, params),
        }
    }
}

/// `Σ_j ℓ_out^j + γ·min_j ℓ_in^j`; the additional term, when enabled, is the
/// largest per-box one.
pub fn concentric_distance<T: Real>(
    set: &BoxSet<T>,
    item: &[T],
    params: &DistanceParams,
) -> Result<T> {
    if set.mode != BoxMode::Concentric {
        return Err(Error::invalid(format!(
            "concentric distance needs a concentric box set, got {}",
            set.mode
        )));
    }
    set.distance(item, params)
}

fn concentric_unchecked<T: Real>(
    boxes: &[Hypercuboid<T>],
    item: &[T],
    params: &DistanceParams,
) -> T {
    let mut outside_sum = T::zero();
    let mut inside_min = T::infinity();
    let mut additional = T::zero();
    for b in boxes {
        let (outside, inside) = b.parts_unchecked(item);
        outside_sum = outside_sum + outside;
        if inside < inside_min {
            inside_min = inside;
        }
        if params.use_additional {
            additional = additional.max(additional_from_parts(
                outside,
                b.offset_sq_norm(),
                params.alpha,
            ));
        }
    }
    outside_sum + T::lit(params.gamma) * inside_min + additional
}

/// `min_j ℓ^j`; the additional term, when enabled, is the largest per-box one
/// added on top of the minimum.
pub fn independent_distance<T: Real>(
    set: &BoxSet<T>,
    item: &[T],
    params: &DistanceParams,
) -> Result<T> {
    if set.mode != BoxMode::Independent {
        return Err(Error::invalid(format!(
            "independent distance needs an independent box set, got {}",
            set.mode
        )));
    }
    set.distance(item, params)
}

fn independent_unchecked<T: Real>(
    boxes: &[Hypercuboid<T>],
    item: &[T],
    params: &DistanceParams,
) -> T {
    let gamma = T::lit(params.gamma);
    let mut best = T::infinity();
    let mut additional = T::zero();
    for b in boxes {
        let (outside, inside) = b.parts_unchecked(item);
        let d = outside + gamma * inside;
        if d < best {
            best = d;
        }
        if params.use_additional {
            additional = additional.max(additional_from_parts(
                outside,
                b.offset_sq_norm(),
                params.alpha,
            ));
        }
    }
    best + additional
}
