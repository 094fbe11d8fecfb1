//! Training instances, negative sampling, the hinge objective and Adagrad.

mod config;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use config::{TrainConfig, CONFIG_KEYS};

use crate::autodiff::{finite_difference_check, Axis, FdReport, Graph, Tensor, Var};
use crate::datasets::SplitDataset;
use crate::encoder::{
    encode_graph, pad_window, save_checkpoint, BoundParams, BoxVars, EncoderConfig, Model, PADDING_ID,
};
use crate::error::{Error, Result};
use crate::geometry::{BoxMode, DistanceParams};
use crate::scalar::Real;

pub const ADAGRAD_EPS: f64 = 1e-8;

/// Instances per parallel work unit. Fixed so that the gradient reduction
/// has the same shape for any thread count.
const CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainInstance {
    pub user: usize,
    /// `L` ids, left-padded.
    pub window: Vec<usize>,
    /// Up to `T` following ids.
    pub targets: Vec<usize>,
}

/// One instance per position of each train sequence that has a successor:
/// the window ends at that position, the targets are the next `targets`
/// items.
pub fn make_instances(split: &SplitDataset, window: usize, targets: usize) -> Vec<TrainInstance> {
    let mut out = Vec::new();
    for user in split.user_ids() {
        let seq = &split.train[user - 1];
        for t in 0..seq.len().saturating_sub(1) {
            let end = (t + 1 + targets).min(seq.len());
            out.push(TrainInstance {
                user,
                window: pad_window(&seq[..=t], window),
                targets: seq[t + 1..end].to_vec(),
            });
        }
    }
    out
}

/// `count` ids drawn uniformly (with replacement) from `1..=n_items` minus
/// `positives`.
pub fn sample_negatives<R: Rng + ?Sized>(
    positives: &HashSet<usize>,
    n_items: usize,
    count: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let excluded = positives.iter().filter(|&&i| (1..=n_items).contains(&i)).count();
    if excluded >= n_items {
        return Err(Error::data("no item is left to sample as a negative"));
    }
    // Rejection is cheap while most items are eligible; otherwise draw from
    // the explicit complement.
    if excluded * 2 <= n_items {
        Ok((0..count)
            .map(|_| loop {
                let i = rng.gen_range(1..=n_items);
                if !positives.contains(&i) {
                    break i;
                }
            })
            .collect())
    } else {
        let pool: Vec<usize> = (1..=n_items).filter(|i| !positives.contains(i)).collect();
        Ok((0..count).map(|_| pool[rng.gen_range(0..pool.len())]).collect())
    }
}

/// Train-positive sets per user, for repeated sampling.
#[derive(Debug, Clone)]
pub struct NegativeSampler {
    n_items: usize,
    positives: Vec<HashSet<usize>>,
}

impl NegativeSampler {
    pub fn new(split: &SplitDataset) -> Self {
        Self {
            n_items: split.n_items(),
            positives: split.train.iter().map(|s| s.iter().copied().collect()).collect(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, user: usize, count: usize, rng: &mut R) -> Result<Vec<usize>> {
        let set = user
            .checked_sub(1)
            .and_then(|k| self.positives.get(k))
            .ok_or_else(|| Error::invalid(format!("unknown user id {user}")))?;
        sample_negatives(set, self.n_items, count, rng)
    }
}

/// `max(0, pos + margin − neg)`.
pub fn hinge(pos: f64, neg: f64, margin: f64) -> f64 {
    (pos + margin - neg).max(0.0)
}

/// Per-box pieces for `k` item rows: `(ℓ_out, ℓ_in, additional)`, each `k×1`.
fn box_parts<T: Real>(
    g: &mut Graph<T>,
    center: Var,
    offset: Var,
    items: Var,
    params: &DistanceParams,
) -> Result<(Var, Var, Option<Var>)> {
    let rep = vec![0; g.shape(items)[0]];
    let c = g.gather_rows(center, &rep)?;
    let f = g.gather_rows(offset, &rep)?;
    let lower = g.sub(c, f)?;
    let upper = g.add(c, f)?;
    // Ties go to the item coordinate, i.e. the interior branch.
    let p = g.elementwise_max(items, lower)?;
    let p = g.elementwise_min(p, upper)?;
    let out = g.sub(p, items)?;
    let out = g.mul(out, out)?;
    let out = g.reduce_sum(out, Axis::Cols)?;
    let inside = g.sub(p, c)?;
    let inside = g.mul(inside, inside)?;
    let inside = g.reduce_sum(inside, Axis::Cols)?;
    let additional = if params.use_additional {
        let norm = g.squared_norm(offset)?;
        let norm = g.gather_rows(norm, &rep)?;
        let gate = g.scale(out, T::lit(params.alpha * 0.5))?;
        let gate = g.tanh(gate)?;
        Some(g.mul(gate, norm)?)
    } else {
        None
    };
    Ok((out, inside, additional))
}

fn combine<T: Real>(g: &mut Graph<T>, cols: &[Var], axis_min: bool) -> Result<Var> {
    if cols.len() == 1 {
        return Ok(cols[0]);
    }
    let m = g.concat(cols, 1)?;
    if axis_min {
        g.reduce_min(m, Axis::Cols)
    } else {
        g.reduce_max(m, Axis::Cols)
    }
}

/// Distances from a box set to the rows of `items` (`k×d`), as a `k×1`
/// column, following the set's mode.
pub fn distance_graph<T: Real>(g: &mut Graph<T>, boxes: &BoxVars, items: Var, params: &DistanceParams) -> Result<Var> {
    let gamma = T::lit(params.gamma);
    let mut outs = Vec::new();
    let mut ins = Vec::new();
    let mut adds = Vec::new();
    for (&c, &f) in boxes.centers.iter().zip(&boxes.offsets) {
        let (o, i, a) = box_parts(g, c, f, items, params)?;
        outs.push(o);
        ins.push(i);
        adds.extend(a);
    }
    let base = match boxes.mode {
        BoxMode::Single => {
            let i = g.scale(ins[0], gamma)?;
            g.add(outs[0], i)?
        }
        BoxMode::Concentric => {
            let mut total = outs[0];
            for &o in &outs[1..] {
                total = g.add(total, o)?;
            }
            let i = combine(g, &ins, true)?;
            let i = g.scale(i, gamma)?;
            g.add(total, i)?
        }
        BoxMode::Independent => {
            let mut per_box = Vec::with_capacity(outs.len());
            for (&o, &i) in outs.iter().zip(&ins) {
                let i = g.scale(i, gamma)?;
                per_box.push(g.add(o, i)?);
            }
            combine(g, &per_box, true)?
        }
    };
    if adds.is_empty() {
        return Ok(base);
    }
    let a = combine(g, &adds, false)?;
    g.add(base, a)
}

/// Summed hinge loss for one window: `positives[j]` is paired with
/// `negatives[j]`. All ids index the table bound in `params`.
#[allow(clippy::too_many_arguments)]
pub fn instance_loss_graph<T: Real, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    params: &BoundParams,
    config: &EncoderConfig,
    distance: &DistanceParams,
    margin: f64,
    window: &[usize],
    positives: &[usize],
    negatives: &[usize],
    dropout_rng: Option<&mut R>,
) -> Result<Var> {
    if positives.len() != negatives.len() || positives.is_empty() {
        return Err(Error::invalid("need one negative per positive and at least one pair"));
    }
    let boxes = encode_graph(g, window, config, params, dropout_rng)?;
    let ids: Vec<usize> = positives.iter().chain(negatives).copied().collect();
    let items = g.gather_rows(params.item_table, &ids)?;
    let dist = distance_graph(g, &boxes, items, distance)?;
    let k = positives.len();
    let pos = g.slice(dist, 0, 0, k)?;
    let neg = g.slice(dist, 0, k, k)?;
    let gap = g.sub(pos, neg)?;
    let gap = g.shift(gap, T::lit(margin))?;
    let hinge = g.relu(gap)?;
    g.reduce_sum(hinge, Axis::All)
}

/// One Adagrad update in place: `acc += g²`, `θ −= lr·g / (√acc + ε)`, with
/// `g` first augmented by `2·l2·θ`.
pub fn adagrad_step<T: Real>(theta: &mut [T], grad: &[T], acc: &mut [T], lr: f64, l2: f64, eps: f64) -> Result<()> {
    if theta.len() != grad.len() || theta.len() != acc.len() {
        return Err(Error::invalid("adagrad_step: length mismatch"));
    }
    let (lr, l2, eps) = (T::lit(lr), T::lit(2.0 * l2), T::lit(eps));
    for ((t, &g), a) in theta.iter_mut().zip(grad).zip(acc.iter_mut()) {
        let g = g + l2 * *t;
        if !g.is_finite() {
            return Err(Error::NumericFault { op: "adagrad_step" });
        }
        *a = *a + g * g;
        *t = *t - lr * g / (a.sqrt() + eps);
    }
    Ok(())
}

/// Squared-gradient accumulators, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub embeddings: Tensor<f32>,
    pub dense: Vec<Tensor<f32>>,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(model: &Model<f32>) -> Self {
        let named = model.params.named();
        Self {
            embeddings: Tensor::zeros(named[0].1.shape()),
            dense: named[1..].iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
            eps: ADAGRAD_EPS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_seconds: f64,
    pub pairs: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub trace: Vec<EpochStats>,
}

/// One sampled unit of work for an epoch.
#[derive(Debug, Clone)]
struct Job<'a> {
    instance: &'a TrainInstance,
    positives: Vec<usize>,
    negatives: Vec<usize>,
    dropout_seed: u64,
}

struct ChunkGrad {
    loss: f64,
    pairs: usize,
    dense: Vec<Tensor<f32>>,
    rows: BTreeMap<usize, Vec<f32>>,
}

fn chunk_gradient(model: &Model<f32>, jobs: &[Job<'_>], config: &TrainConfig) -> Result<ChunkGrad> {
    let d = model.config.dim;
    // Local table: row 0 is padding, then every id the chunk touches.
    let mut local: HashMap<usize, usize> = HashMap::new();
    let mut order = Vec::new();
    for job in jobs {
        let ids = job.instance.window.iter().chain(&job.positives).chain(&job.negatives);
        for &id in ids.filter(|&&id| id != PADDING_ID) {
            local.entry(id).or_insert_with(|| {
                order.push(id);
                order.len()
            });
        }
    }
    let mut rows = vec![0f32; (order.len() + 1) * d];
    for (k, &id) in order.iter().enumerate() {
        rows[(k + 1) * d..(k + 2) * d].copy_from_slice(model.item(id));
    }
    let map = |ids: &[usize]| -> Vec<usize> { ids.iter().map(|id| if *id == PADDING_ID { 0 } else { local[id] }).collect() };

    let mut g = Graph::new();
    let table = g.param(Tensor::matrix(order.len() + 1, d, rows)?);
    let bound = model.params.bind(&mut g, table, true);
    let mut losses = Vec::with_capacity(jobs.len());
    let mut pairs = 0;
    for job in jobs {
        let mut rng = ChaCha8Rng::seed_from_u64(job.dropout_seed);
        let loss = instance_loss_graph(
            &mut g,
            &bound,
            &model.config,
            &model.distance,
            config.margin,
            &map(&job.instance.window),
            &map(&job.positives),
            &map(&job.negatives),
            Some(&mut rng),
        )?;
        losses.push(loss);
        pairs += job.positives.len();
    }
    let stacked = g.concat(&losses, 0)?;
    let total = g.reduce_sum(stacked, Axis::All)?;
    let loss = g.value(total).item() as f64;
    let mut grads = g.backward(total)?;
    let dense = bound
        .dense_vars()
        .into_iter()
        .map(|v| grads.take(v).unwrap_or_else(|| Tensor::zeros(g.shape(v))))
        .collect();
    let table_grad = grads.take(table).unwrap_or_else(|| Tensor::zeros(g.shape(table)));
    let rows = order
        .iter()
        .enumerate()
        .map(|(k, &id)| (id, table_grad.row_slice(k + 1).to_vec()))
        .collect();
    Ok(ChunkGrad {
        loss,
        pairs,
        dense,
        rows,
    })
}

/// Names of dense tensors that receive the L2 penalty (head weights).
fn l2_mask(model: &Model<f32>) -> Vec<bool> {
    model.params.named()[1..]
        .iter()
        .map(|(n, _)| (n.starts_with("center.") || n.starts_with("offset.")) && n.ends_with(".weight"))
        .collect()
}

fn apply_step(model: &mut Model<f32>, state: &mut OptimizerState, grad: &ChunkGrad, config: &TrainConfig, mask: &[bool]) -> Result<()> {
    let lr = config.learning_rate;
    let eps = state.eps;
    let d = model.config.dim;
    let mut tensors = model.params.tensors_mut();
    let table = tensors.remove(0);
    for (id, row) in &grad.rows {
        let theta = &mut table.data_mut()[id * d..(id + 1) * d];
        let acc = &mut state.embeddings.data_mut()[id * d..(id + 1) * d];
        adagrad_step(theta, row, acc, lr, config.l2, eps)?;
    }
    for (((t, g), acc), &decay) in tensors.into_iter().zip(&grad.dense).zip(&mut state.dense).zip(mask) {
        let l2 = if decay { config.l2 } else { 0.0 };
        adagrad_step(t.data_mut(), g.data(), acc.data_mut(), lr, l2, eps)?;
    }
    Ok(())
}

fn reduce(parts: Vec<ChunkGrad>) -> Option<ChunkGrad> {
    let mut it = parts.into_iter();
    let mut acc = it.next()?;
    for part in it {
        acc.loss += part.loss;
        acc.pairs += part.pairs;
        for (a, b) in acc.dense.iter_mut().zip(&part.dense) {
            a.add_assign(b);
        }
        for (id, row) in part.rows {
            match acc.rows.get_mut(&id) {
                Some(r) => r.iter_mut().zip(&row).for_each(|(x, y)| *x += y),
                None => {
                    acc.rows.insert(id, row);
                }
            }
        }
    }
    Some(acc)
}

/// Trains a fresh model. With `out_dir`, writes `epoch-NNN.ckpt` after
/// every epoch, `model.ckpt` at the end, `loss_trace.tsv` and
/// `config.txt`.
pub fn fit(split: &SplitDataset, config: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let model = Model::<f32>::init(config.encoder.clone(), config.distance, split.n_items(), &mut rng)?;
    fit_model(model, split, config, out_dir, &mut rng)
}

fn fit_model(
    mut model: Model<f32>,
    split: &SplitDataset,
    config: &TrainConfig,
    out_dir: Option<&Path>,
    rng: &mut ChaCha8Rng,
) -> Result<TrainOutcome> {
    let instances = make_instances(split, config.encoder.window, config.targets);
    if instances.is_empty() {
        return Err(Error::data("training set has no instance with a following item"));
    }
    let sampler = NegativeSampler::new(split);
    let mut state = OptimizerState::new(&model);
    let mask = l2_mask(&model);
    let mut trace = Vec::new();
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.txt");
        fs::write(&path, config.to_kv()).map_err(|e| Error::io(&path, e))?;
        let path = dir.join("loss_trace.tsv");
        fs::write(&path, "").map_err(|e| Error::io(&path, e))?;
    }
    let mut order: Vec<usize> = (0..instances.len()).collect();
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        order.shuffle(rng);
        let n = config.negatives_per_positive;
        let mut jobs = Vec::with_capacity(order.len());
        for &k in &order {
            let inst = &instances[k];
            let positives: Vec<usize> = inst.targets.iter().flat_map(|&p| std::iter::repeat(p).take(n)).collect();
            let negatives = sampler.sample(inst.user, positives.len(), rng)?;
            jobs.push(Job {
                instance: inst,
                positives,
                negatives,
                dropout_seed: rng.gen(),
            });
        }
        let (mut loss, mut pairs) = (0.0, 0);
        for (step, batch) in jobs.chunks(config.batch_size).enumerate() {
            let context = |e: Error| Error::Training {
                epoch,
                step,
                source: Box::new(e),
            };
            let model_ref = &model;
            let parts = batch
                .par_chunks(CHUNK)
                .map(|c| chunk_gradient(model_ref, c, config))
                .collect::<Result<Vec<_>>>()
                .map_err(context)?;
            let grad = reduce(parts).expect("batch is non-empty");
            loss += grad.loss;
            pairs += grad.pairs;
            apply_step(&mut model, &mut state, &grad, config, &mask).map_err(context)?;
        }
        let stats = EpochStats {
            epoch,
            mean_loss: loss / pairs as f64,
            wall_seconds: started.elapsed().as_secs_f64(),
            pairs,
        };
        log::info!("epoch {epoch}: mean loss {:.6} ({:.2}s)", stats.mean_loss, stats.wall_seconds);
        if let Some(dir) = out_dir {
            save_checkpoint(&dir.join(format!("epoch-{epoch:03}.ckpt")), &model)?;
            let path = dir.join("loss_trace.tsv");
            let mut f = fs::OpenOptions::new()
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            writeln!(f, "{}", trace_line(&stats)).map_err(|e| Error::io(&path, e))?;
        }
        trace.push(stats);
    }
    if let Some(dir) = out_dir {
        save_checkpoint(&dir.join("model.ckpt"), &model)?;
    }
    Ok(TrainOutcome { model, trace })
}

/// `epoch<TAB>mean_loss<TAB>wall_seconds`.
pub fn trace_line(s: &EpochStats) -> String {
    format!("{}\t{:.6}\t{:.3}", s.epoch, s.mean_loss, s.wall_seconds)
}

/// Finite-difference check of the full per-window loss (encoder, distance
/// and hinge) with respect to every parameter, at toy sizes in 64-bit.
pub fn loss_gradient_check(
    mode: BoxMode,
    boxes: usize,
    distance: DistanceParams,
    seed: u64,
    step: f64,
    tolerance: f64,
) -> Result<FdReport> {
    let config = EncoderConfig {
        dim: 4,
        window: 3,
        boxes,
        mode,
        memory_slots: 2,
        init_std: 0.5,
        offset_bias_init: 0.3,
        ..EncoderConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::<f64>::init(config.clone(), distance, 6, &mut rng)?;
    let mut params = vec![model.params.item_embeddings.clone()];
    params.extend(model.params.named()[1..].iter().map(|(_, t)| (*t).clone()));
    let window = [0, 2, 5];
    let positives = [3, 1];
    let negatives = [4, 6];
    // A wide margin keeps every pair active so all parameters get gradient.
    let margin = 25.0;
    finite_difference_check(
        |g, vars| {
            let bound = BoundParams::from_dense(&config, vars[0], &vars[1..])?;
            instance_loss_graph::<f64, ChaCha8Rng>(g, &bound, &config, &distance, margin, &window, &positives, &negatives, None)
        },
        &params,
        step,
        tolerance,
    )
}
