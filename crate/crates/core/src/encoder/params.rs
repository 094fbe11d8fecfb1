use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::EncoderConfig;
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::BoxMode;
use crate::scalar::Real;

/// `x · weight + bias` with `weight: in×out`, `bias: 1×out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// One LSTM direction. Gate columns are ordered input, forget, output,
/// candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams<T> {
    pub w_input: Tensor<T>,
    pub w_hidden: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    /// `(|I| + 1) × d`; row 0 is the padding item and stays zero.
    pub item_embeddings: Tensor<T>,
    pub lstm_fwd: LstmParams<T>,
    pub lstm_bwd: LstmParams<T>,
    pub attn: Affine<T>,
    /// `d × N`
    pub keys: Tensor<T>,
    /// `d × N`
    pub memory: Tensor<T>,
    pub center_heads: Vec<Affine<T>>,
    pub offset_heads: Vec<Affine<T>>,
}

/// Number of (center, offset) heads for a configuration.
pub fn head_counts(config: &EncoderConfig) -> (usize, usize) {
    match config.mode {
        BoxMode::Single => (1, 1),
        BoxMode::Concentric => (1, config.boxes),
        BoxMode::Independent => (config.boxes, config.boxes),
    }
}

fn normal<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("valid std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| T::lit(dist.sample(rng))).collect())
        .expect("shape")
}

impl<T: Real> Affine<T> {
    fn init<R: Rng + ?Sized>(rng: &mut R, input: usize, output: usize, std: f64) -> Self {
        Self {
            weight: normal(rng, &[input, output], std),
            bias: Tensor::zeros(&[1, output]),
        }
    }
}

impl<T: Real> LstmParams<T> {
    fn init<R: Rng + ?Sized>(rng: &mut R, input: usize, hidden: usize, std: f64) -> Self {
        Self {
            w_input: normal(rng, &[input, 4 * hidden], std),
            w_hidden: normal(rng, &[hidden, 4 * hidden], std),
            bias: Tensor::zeros(&[1, 4 * hidden]),
        }
    }
}

impl<T: Real> EncoderParams<T> {
    /// Normal initialization; biases start at zero.
    pub fn init<R: Rng + ?Sized>(config: &EncoderConfig, n_items: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let h = d / 2;
        let std = config.init_std;
        let mut item_embeddings = normal(rng, &[n_items + 1, d], std);
        item_embeddings.row_slice_mut(0).fill(T::zero());
        let lstm_fwd = LstmParams::init(rng, d, h, std);
        let lstm_bwd = LstmParams::init(rng, d, h, std);
        let attn = Affine::init(rng, d, d, std);
        let keys = normal(rng, &[d, config.memory_slots], std);
        let memory = normal(rng, &[d, config.memory_slots], std);
        let (nc, nf) = head_counts(config);
        let center_heads = (0..nc).map(|_| Affine::init(rng, d, d, std)).collect();
        let mut offset_heads: Vec<Affine<T>> = (0..nf).map(|_| Affine::init(rng, d, d, std)).collect();
        for head in &mut offset_heads {
            head.bias = Tensor::full(&[1, d], T::lit(config.offset_bias_init));
        }
        Ok(Self {
            item_embeddings,
            lstm_fwd,
            lstm_bwd,
            attn,
            keys,
            memory,
            center_heads,
            offset_heads,
        })
    }

    pub fn n_items(&self) -> usize {
        self.item_embeddings.rows() - 1
    }

    /// Every tensor with its stable name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("item_embeddings".to_string(), &self.item_embeddings)];
        for (dir, p) in [("lstm_fwd", &self.lstm_fwd), ("lstm_bwd", &self.lstm_bwd)] {
            out.push((format!("{dir}.w_input"), &p.w_input));
            out.push((format!("{dir}.w_hidden"), &p.w_hidden));
            out.push((format!("{dir}.bias"), &p.bias));
        }
        out.push(("attn.weight".into(), &self.attn.weight));
        out.push(("attn.bias".into(), &self.attn.bias));
        out.push(("memory.keys".into(), &self.keys));
        out.push(("memory.values".into(), &self.memory));
        for (j, a) in self.center_heads.iter().enumerate() {
            out.push((format!("center.{j}.weight"), &a.weight));
            out.push((format!("center.{j}.bias"), &a.bias));
        }
        for (j, a) in self.offset_heads.iter().enumerate() {
            out.push((format!("offset.{j}.weight"), &a.weight));
            out.push((format!("offset.{j}.bias"), &a.bias));
        }
        out
    }

    /// Mutable tensors in the same order as [`EncoderParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.item_embeddings];
        for p in [&mut self.lstm_fwd, &mut self.lstm_bwd] {
            out.push(&mut p.w_input);
            out.push(&mut p.w_hidden);
            out.push(&mut p.bias);
        }
        out.push(&mut self.attn.weight);
        out.push(&mut self.attn.bias);
        out.push(&mut self.keys);
        out.push(&mut self.memory);
        for a in self.center_heads.iter_mut().chain(self.offset_heads.iter_mut()) {
            out.push(&mut a.weight);
            out.push(&mut a.bias);
        }
        out
    }

    /// Rebuilds from tensors listed in [`EncoderParams::named`] order.
    pub fn from_tensors(config: &EncoderConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        let (nc, nf) = head_counts(config);
        let expected = 1 + 6 + 2 + 2 + 2 * (nc + nf);
        if tensors.len() != expected {
            return Err(Error::Checkpoint(format!(
                "expected {expected} tensors, found {}",
                tensors.len()
            )));
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("counted");
        let item_embeddings = next();
        let mut lstm = || LstmParams {
            w_input: next(),
            w_hidden: next(),
            bias: next(),
        };
        let lstm_fwd = lstm();
        let lstm_bwd = lstm();
        let mut next = || it.next().expect("counted");
        let attn = Affine {
            weight: next(),
            bias: next(),
        };
        let keys = next();
        let memory = next();
        let center_heads = (0..nc)
            .map(|_| Affine {
                weight: next(),
                bias: next(),
            })
            .collect();
        let offset_heads = (0..nf)
            .map(|_| Affine {
                weight: next(),
                bias: next(),
            })
            .collect();
        let params = Self {
            item_embeddings,
            lstm_fwd,
            lstm_bwd,
            attn,
            keys,
            memory,
            center_heads,
            offset_heads,
        };
        params.check_shapes(config)?;
        Ok(params)
    }

    pub fn check_shapes(&self, config: &EncoderConfig) -> Result<()> {
        let d = config.dim;
        let h = d / 2;
        let n = config.memory_slots;
        let mut want: Vec<(String, Vec<usize>)> = vec![("item_embeddings".into(), vec![self.item_embeddings.rows(), d])];
        for dir in ["lstm_fwd", "lstm_bwd"] {
            want.push((format!("{dir}.w_input"), vec![d, 4 * h]));
            want.push((format!("{dir}.w_hidden"), vec![h, 4 * h]));
            want.push((format!("{dir}.bias"), vec![1, 4 * h]));
        }
        want.push(("attn.weight".into(), vec![d, d]));
        want.push(("attn.bias".into(), vec![1, d]));
        want.push(("memory.keys".into(), vec![d, n]));
        want.push(("memory.values".into(), vec![d, n]));
        let (nc, nf) = head_counts(config);
        for j in 0..nc {
            want.push((format!("center.{j}.weight"), vec![d, d]));
            want.push((format!("center.{j}.bias"), vec![1, d]));
        }
        for j in 0..nf {
            want.push((format!("offset.{j}.weight"), vec![d, d]));
            want.push((format!("offset.{j}.bias"), vec![1, d]));
        }
        let named = self.named();
        if named.len() != want.len() {
            return Err(Error::invalid("parameter count does not match the configuration"));
        }
        for ((name, t), (wname, wshape)) in named.iter().zip(&want) {
            if name != wname || t.shape() != wshape.as_slice() {
                return Err(Error::invalid(format!(
                    "parameter {name} has shape {:?}, expected {wname} {:?}",
                    t.shape(),
                    wshape
                )));
            }
            if !t.is_finite() {
                return Err(Error::NumericFault { op: "parameters" });
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> EncoderParams<U> {
        let lstm = |p: &LstmParams<T>| LstmParams {
            w_input: p.w_input.cast(),
            w_hidden: p.w_hidden.cast(),
            bias: p.bias.cast(),
        };
        let affine = |a: &Affine<T>| Affine {
            weight: a.weight.cast(),
            bias: a.bias.cast(),
        };
        EncoderParams {
            item_embeddings: self.item_embeddings.cast(),
            lstm_fwd: lstm(&self.lstm_fwd),
            lstm_bwd: lstm(&self.lstm_bwd),
            attn: affine(&self.attn),
            keys: self.keys.cast(),
            memory: self.memory.cast(),
            center_heads: self.center_heads.iter().map(affine).collect(),
            offset_heads: self.offset_heads.iter().map(affine).collect(),
        }
    }

    /// Registers every tensor except the item table in `g`, as trainable
    /// leaves or constants. `item_table` supplies the embedding rows to use.
    pub fn bind(&self, g: &mut Graph<T>, item_table: Var, trainable: bool) -> BoundParams {
        let mut leaf = |t: &Tensor<T>| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let mut lstm = |p: &LstmParams<T>| BoundLstm {
            w_input: leaf(&p.w_input),
            w_hidden: leaf(&p.w_hidden),
            bias: leaf(&p.bias),
        };
        let lstm_fwd = lstm(&self.lstm_fwd);
        let lstm_bwd = lstm(&self.lstm_bwd);
        let mut affine = |a: &Affine<T>| BoundAffine {
            weight: leaf(&a.weight),
            bias: leaf(&a.bias),
        };
        let attn = affine(&self.attn);
        let center_heads = self.center_heads.iter().map(&mut affine).collect();
        let offset_heads = self.offset_heads.iter().map(&mut affine).collect();
        let keys = leaf(&self.keys);
        let memory = leaf(&self.memory);
        BoundParams {
            item_table,
            lstm_fwd,
            lstm_bwd,
            attn,
            keys,
            memory,
            center_heads,
            offset_heads,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundAffine {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLstm {
    pub w_input: Var,
    pub w_hidden: Var,
    pub bias: Var,
}

/// Graph handles for one set of [`EncoderParams`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub item_table: Var,
    pub lstm_fwd: BoundLstm,
    pub lstm_bwd: BoundLstm,
    pub attn: BoundAffine,
    pub keys: Var,
    pub memory: Var,
    pub center_heads: Vec<BoundAffine>,
    pub offset_heads: Vec<BoundAffine>,
}

impl BoundParams {
    /// Handles in [`EncoderParams::named`] order, skipping the item table.
    pub fn dense_vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for p in [&self.lstm_fwd, &self.lstm_bwd] {
            out.extend([p.w_input, p.w_hidden, p.bias]);
        }
        out.extend([self.attn.weight, self.attn.bias, self.keys, self.memory]);
        for a in self.center_heads.iter().chain(&self.offset_heads) {
            out.extend([a.weight, a.bias]);
        }
        out
    }

    /// Inverse of [`BoundParams::dense_vars`].
    pub fn from_dense(config: &EncoderConfig, item_table: Var, vars: &[Var]) -> Result<Self> {
        let (nc, nf) = head_counts(config);
        let expected = 6 + 2 + 2 + 2 * (nc + nf);
        if vars.len() != expected {
            return Err(Error::invalid(format!("expected {expected} parameter handles, got {}", vars.len())));
        }
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("counted");
        let mut lstm = || BoundLstm {
            w_input: next(),
            w_hidden: next(),
            bias: next(),
        };
        let lstm_fwd = lstm();
        let lstm_bwd = lstm();
        let mut next = || it.next().expect("counted");
        let attn = BoundAffine {
            weight: next(),
            bias: next(),
        };
        let keys = next();
        let memory = next();
        let mut heads = |n: usize| -> Vec<BoundAffine> {
            (0..n)
                .map(|_| BoundAffine {
                    weight: next(),
                    bias: next(),
                })
                .collect()
        };
        let center_heads = heads(nc);
        let offset_heads = heads(nf);
        Ok(Self {
            item_table,
            lstm_fwd,
            lstm_bwd,
            attn,
            keys,
            memory,
            center_heads,
            offset_heads,
        })
    }
}
