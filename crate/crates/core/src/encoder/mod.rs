//! Sequence encoder: last `L` items in, one or more hypercuboids out.
//!
//! The pipeline is embedding lookup, bidirectional LSTM, self-attention
//! (values are the raw embeddings), pooling, a key-value memory read, and
//! affine heads. Centers come from the pooled vector, offsets from the
//! memory readout through a ReLU.

mod checkpoint;
mod params;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use params::{head_counts, Affine, BoundAffine, BoundLstm, BoundParams, EncoderParams, LstmParams};

use crate::autodiff::{Axis, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{BoxMode, BoxSet, DistanceParams, Hypercuboid};
use crate::scalar::Real;

/// Reserved item id for left padding.
pub const PADDING_ID: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Mean,
    Sum,
    Min,
    Max,
}

impl Pooling {
    pub const ALL: [Pooling; 4] = [Pooling::Mean, Pooling::Sum, Pooling::Min, Pooling::Max];

    pub fn tag(self) -> u32 {
        match self {
            Pooling::Mean => 0,
            Pooling::Sum => 1,
            Pooling::Min => 2,
            Pooling::Max => 3,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        Self::ALL.get(tag as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Pooling::Mean => "mean",
            Pooling::Sum => "sum",
            Pooling::Min => "min",
            Pooling::Max => "max",
        }
    }
}

impl std::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown pooling `{s}`")))
    }
}

impl std::fmt::Display for Pooling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Which parts of the encoder run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    None,
    /// Skip the LSTM and attention: the pooled vector is the mean of the raw
    /// window embeddings.
    NoNn,
}

impl Ablation {
    pub fn tag(self) -> u32 {
        match self {
            Ablation::None => 0,
            Ablation::NoNn => 1,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            0 => Some(Ablation::None),
            1 => Some(Ablation::NoNn),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoNn => "no-nn",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Ablation::None),
            "no-nn" => Ok(Ablation::NoNn),
            other => Err(Error::invalid(format!("unknown ablation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Embedding size `d`; must be even.
    pub dim: usize,
    /// Window length `L`.
    pub window: usize,
    /// Box count `M`.
    pub boxes: usize,
    pub mode: BoxMode,
    /// Memory slots `N`.
    pub memory_slots: usize,
    pub pooling: Pooling,
    pub dropout: f64,
    pub ablation: Ablation,
    /// Force every offset to zero (point-embedding baseline).
    pub freeze_offsets: bool,
    pub init_std: f64,
    pub offset_bias_init: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 100,
            window: 5,
            boxes: 1,
            mode: BoxMode::Single,
            memory_slots: 20,
            pooling: Pooling::Mean,
            dropout: 0.0,
            ablation: Ablation::None,
            freeze_offsets: false,
            init_std: 0.1,
            offset_bias_init: 0.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim % 2 != 0 {
            return Err(Error::invalid(format!("dim must be even and positive, got {}", self.dim)));
        }
        if self.window == 0 {
            return Err(Error::invalid("window length must be at least 1"));
        }
        if self.memory_slots == 0 {
            return Err(Error::invalid("memory needs at least one slot"));
        }
        if self.boxes == 0 {
            return Err(Error::invalid("at least one box is required"));
        }
        if self.mode == BoxMode::Single && self.boxes != 1 {
            return Err(Error::invalid("single mode uses exactly one box"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::invalid("init_std must be positive"));
        }
        Ok(())
    }
}

/// Box parameters as graph nodes (`1×d` each). In concentric mode every
/// entry of `centers` is the same node.
#[derive(Debug, Clone)]
pub struct BoxVars {
    pub mode: BoxMode,
    pub centers: Vec<Var>,
    pub offsets: Vec<Var>,
}

impl BoxVars {
    pub fn to_box_set<T: Real>(&self, g: &Graph<T>) -> Result<BoxSet<T>> {
        let boxes = self
            .centers
            .iter()
            .zip(&self.offsets)
            .map(|(&c, &f)| Hypercuboid::new(g.value(c).data().to_vec(), g.value(f).data().to_vec()))
            .collect::<Result<Vec<_>>>()?;
        BoxSet::new(self.mode, boxes)
    }
}

/// `L × d` embedding rows for a window; padding ids give zero rows.
pub fn embed_sequence<T: Real>(g: &mut Graph<T>, table: Var, window: &[usize]) -> Result<Var> {
    g.gather_rows(table, window)
}

fn affine<T: Real>(g: &mut Graph<T>, x: Var, a: &BoundAffine) -> Result<Var> {
    let y = g.matmul(x, a.weight)?;
    g.add(y, a.bias)
}

/// One LSTM direction over the rows of `seq`, returning hidden states in
/// row order. `reverse` walks from the last row to the first.
fn lstm_direction<T: Real>(g: &mut Graph<T>, seq: Var, p: &BoundLstm, reverse: bool) -> Result<Var> {
    let steps = g.shape(seq)[0];
    let hidden = g.shape(p.w_hidden)[0];
    // Input projections for all steps at once.
    let projected = g.matmul(seq, p.w_input)?;
    let projected = g.add(projected, p.bias)?;

    let mut outputs = vec![None; steps];
    let mut state: Option<(Var, Var)> = None;
    let order: Vec<usize> = if reverse {
        (0..steps).rev().collect()
    } else {
        (0..steps).collect()
    };
    for t in order {
        let mut gates = g.slice(projected, 0, t, 1)?;
        if let Some((h, _)) = state {
            let rec = g.matmul(h, p.w_hidden)?;
            gates = g.add(gates, rec)?;
        }
        let i = g.slice(gates, 1, 0, hidden)?;
        let i = g.sigmoid(i)?;
        let o = g.slice(gates, 1, 2 * hidden, hidden)?;
        let o = g.sigmoid(o)?;
        let cand = g.slice(gates, 1, 3 * hidden, hidden)?;
        let cand = g.tanh(cand)?;
        let mut c = g.mul(i, cand)?;
        if let Some((_, c_prev)) = state {
            let f = g.slice(gates, 1, hidden, hidden)?;
            let f = g.sigmoid(f)?;
            let keep = g.mul(f, c_prev)?;
            c = g.add(c, keep)?;
        }
        let squashed = g.tanh(c)?;
        let h = g.mul(o, squashed)?;
        outputs[t] = Some(h);
        state = Some((h, c));
    }
    let rows: Vec<Var> = outputs.into_iter().map(|h| h.expect("every step visited")).collect();
    g.concat(&rows, 0)
}

/// Bidirectional LSTM with `d/2` hidden units per direction; row `t` of the
/// output is `[forward_t, backward_t]`.
pub fn bilstm<T: Real>(g: &mut Graph<T>, seq: Var, params: &BoundParams) -> Result<Var> {
    let fwd = lstm_direction(g, seq, &params.lstm_fwd, false)?;
    let bwd = lstm_direction(g, seq, &params.lstm_bwd, true)?;
    g.concat(&[fwd, bwd], 1)
}

/// `softmax(f(S′)·f(S′)ᵀ / √d) · S` with `f(x) = tanh(x·W + b)`.
pub fn self_attention<T: Real>(g: &mut Graph<T>, contextual: Var, raw: Var, params: &BoundParams) -> Result<Var> {
    let weights = attention_weights(g, contextual, params)?;
    g.matmul(weights, raw)
}

/// The row-stochastic attention matrix alone.
pub fn attention_weights<T: Real>(g: &mut Graph<T>, contextual: Var, params: &BoundParams) -> Result<Var> {
    let d = g.shape(contextual)[1];
    let projected = affine(g, contextual, &params.attn)?;
    let projected = g.tanh(projected)?;
    let transposed = g.transpose(projected)?;
    let logits = g.matmul(projected, transposed)?;
    let logits = g.scale(logits, T::lit(1.0 / (d as f64).sqrt()))?;
    g.softmax_rows(logits)
}

/// Pools the rows marked valid into a `1×d` vector.
pub fn pool<T: Real>(g: &mut Graph<T>, rows: Var, pooling: Pooling, valid: &[bool]) -> Result<Var> {
    let n = g.shape(rows)[0];
    if valid.len() != n {
        return Err(Error::invalid(format!("mask has {} entries for {n} rows", valid.len())));
    }
    let keep: Vec<usize> = (0..n).filter(|&r| valid[r]).collect();
    if keep.is_empty() {
        return Err(Error::invalid("pooling needs at least one valid row"));
    }
    let selected = if keep.len() == n { rows } else { g.gather_rows(rows, &keep)? };
    match pooling {
        Pooling::Mean => g.reduce_mean(selected, Axis::Rows),
        Pooling::Sum => g.reduce_sum(selected, Axis::Rows),
        Pooling::Min => g.reduce_min(selected, Axis::Rows),
        Pooling::Max => g.reduce_max(selected, Axis::Rows),
    }
}

/// Key-value memory read: `k = softmax(s·K)`, `m = k·Mᵀ`.
pub fn memory_read<T: Real>(g: &mut Graph<T>, pooled: Var, params: &BoundParams) -> Result<Var> {
    let keys = memory_keys(g, pooled, params)?;
    let values = g.transpose(params.memory)?;
    g.matmul(keys, values)
}

/// The attentive key vector `k` (`1×N`).
pub fn memory_keys<T: Real>(g: &mut Graph<T>, pooled: Var, params: &BoundParams) -> Result<Var> {
    let logits = g.matmul(pooled, params.keys)?;
    g.softmax_rows(logits)
}

/// Centers from `pooled`, offsets from `readout` through a ReLU.
pub fn build_boxes<T: Real>(
    g: &mut Graph<T>,
    pooled: Var,
    readout: Var,
    config: &EncoderConfig,
    params: &BoundParams,
) -> Result<BoxVars> {
    let m = match config.mode {
        BoxMode::Single => 1,
        _ => config.boxes,
    };
    let mut centers = Vec::with_capacity(m);
    for head in &params.center_heads {
        centers.push(affine(g, pooled, head)?);
    }
    if config.mode == BoxMode::Concentric {
        let shared = centers[0];
        centers = vec![shared; m];
    }
    let mut offsets = Vec::with_capacity(m);
    if config.freeze_offsets {
        let zero = g.constant(Tensor::zeros(&[1, config.dim]));
        offsets = vec![zero; m];
    } else {
        for head in &params.offset_heads {
            let pre = affine(g, readout, head)?;
            offsets.push(g.relu(pre)?);
        }
    }
    Ok(BoxVars {
        mode: config.mode,
        centers,
        offsets,
    })
}

/// Positions of non-padding ids.
pub fn valid_mask(window: &[usize]) -> Vec<bool> {
    window.iter().map(|&id| id != PADDING_ID).collect()
}

/// Pads on the left (or keeps the last `len` ids) so the result has exactly
/// `len` entries.
pub fn pad_window(history: &[usize], len: usize) -> Vec<usize> {
    let tail = &history[history.len().saturating_sub(len)..];
    let mut out = vec![PADDING_ID; len - tail.len()];
    out.extend_from_slice(tail);
    out
}

/// Full pipeline on a bound parameter set. Passing `dropout_rng` selects
/// training mode.
pub fn encode_graph<T: Real, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    window: &[usize],
    config: &EncoderConfig,
    params: &BoundParams,
    dropout_rng: Option<&mut R>,
) -> Result<BoxVars> {
    if window.len() > config.window {
        return Err(Error::invalid(format!(
            "window has {} items, limit is {}",
            window.len(),
            config.window
        )));
    }
    let items: Vec<usize> = window.iter().copied().filter(|&id| id != PADDING_ID).collect();
    if items.is_empty() {
        return Err(Error::invalid("encoding needs at least one interaction"));
    }
    // Padding rows are dropped before the sequence layers, which is the
    // same as masking them out of attention and pooling.
    let raw = embed_sequence(g, params.item_table, &items)?;
    let all = vec![true; items.len()];
    let mut pooled = match config.ablation {
        Ablation::NoNn => pool(g, raw, Pooling::Mean, &all)?,
        Ablation::None => {
            let contextual = bilstm(g, raw, params)?;
            let attended = self_attention(g, contextual, raw, params)?;
            pool(g, attended, config.pooling, &all)?
        }
    };
    if let Some(rng) = dropout_rng {
        if config.dropout > 0.0 {
            pooled = g.dropout_mask(pooled, config.dropout, rng)?;
        }
    }
    let readout = memory_read(g, pooled, params)?;
    build_boxes(g, pooled, readout, config, params)
}

/// A trained (or freshly initialized) model: encoder plus scoring rule.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: EncoderConfig,
    pub distance: DistanceParams,
    pub params: EncoderParams<T>,
}

impl<T: Real> Model<T> {
    pub fn init<R: Rng + ?Sized>(
        config: EncoderConfig,
        distance: DistanceParams,
        n_items: usize,
        rng: &mut R,
    ) -> Result<Self> {
        distance.validate()?;
        let params = EncoderParams::init(&config, n_items, rng)?;
        Ok(Self {
            config,
            distance,
            params,
        })
    }

    pub fn n_items(&self) -> usize {
        self.params.n_items()
    }

    /// Evaluation-mode encoding of a window of at most `L` ids.
    pub fn encode_user(&self, window: &[usize]) -> Result<BoxSet<T>> {
        if let Some(&bad) = window.iter().find(|&&id| id > self.n_items()) {
            return Err(Error::invalid(format!("item id {bad} out of range")));
        }
        // Local table: row 0 stays padding, row k+1 holds window[k].
        let d = self.config.dim;
        let mut rows = vec![T::zero(); (window.len() + 1) * d];
        let mut local = Vec::with_capacity(window.len());
        for (k, &id) in window.iter().enumerate() {
            if id == PADDING_ID {
                local.push(PADDING_ID);
            } else {
                rows[(k + 1) * d..(k + 2) * d].copy_from_slice(self.item(id));
                local.push(k + 1);
            }
        }
        let mut g = Graph::new();
        let table = g.constant(Tensor::matrix(window.len() + 1, d, rows)?);
        let bound = self.params.bind(&mut g, table, false);
        let boxes = encode_graph::<T, rand_chacha::ChaCha8Rng>(&mut g, &local, &self.config, &bound, None)?;
        boxes.to_box_set(&g)
    }

    /// Embedding row of an internal item id.
    pub fn item(&self, id: usize) -> &[T] {
        self.params.item_embeddings.row_slice(id)
    }

    /// Read-only view that scores with every offset forced to zero.
    pub fn point_view(&self) -> PointView<'_, T> {
        PointView { model: self }
    }
}

/// A model seen as a point-embedding recommender: same centers, zero offsets.
#[derive(Debug, Clone, Copy)]
pub struct PointView<'a, T> {
    model: &'a Model<T>,
}

impl<T: Real> PointView<'_, T> {
    pub fn model(&self) -> &Model<T> {
        self.model
    }

    pub fn encode_user(&self, window: &[usize]) -> Result<BoxSet<T>> {
        Ok(self.model.encode_user(window)?.collapsed())
    }
}
