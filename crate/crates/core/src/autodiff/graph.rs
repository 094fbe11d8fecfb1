use rand::Rng;

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reduction extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Whole tensor to a `1×1` scalar.
    All,
    /// Across rows: `m×n` to `1×n`.
    Rows,
    /// Across columns: `m×n` to `m×1`.
    Cols,
}

/// Deliberate backward-pass bugs, used as a negative control for the
/// gradient checker.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InjectedFault {
    TanhBackwardSign,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add { a: Var, b: Var, broadcast: bool },
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Shift(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Transpose(Var),
    GatherRows { table: Var, ids: Vec<usize> },
    Sum(Var, Axis),
    Mean(Var, Axis, usize),
    Pick { input: Var, arg: Vec<usize> },
    EMin { a: Var, b: Var, first: Vec<bool> },
    EMax { a: Var, b: Var, first: Vec<bool> },
    Clamp { input: Var, pass: Vec<bool> },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    SquaredNorm(Var),
    Dropout { input: Var, mask: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, which is a valid topological order;
/// [`Graph::backward`] walks them in reverse.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    branches: u64,
    fault: Option<InjectedFault>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            branches: FNV_OFFSET,
            fault: None,
        }
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: InjectedFault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Hash of every branch decision taken by non-smooth ops so far. Two
    /// forward passes with equal signatures went through the same smooth
    /// piece of the function.
    pub fn branch_signature(&self) -> u64 {
        self.branches
    }

    fn note_branch(&mut self, choice: u64) {
        self.branches = (self.branches ^ choice).wrapping_mul(FNV_PRIME);
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that does not receive a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NumericFault { op: name });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::invalid(format!(
                "{op}: shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).require_rank2("matmul")?;
        let (k2, n) = self.value(b).require_rank2("matmul")?;
        if k != k2 {
            return Err(Error::invalid(format!(
                "matmul: inner dimensions differ ({m}×{k} · {k2}×{n})"
            )));
        }
        let out = gemm(self.value(a).data(), self.value(b).data(), m, k, n, false, false);
        let value = Tensor::matrix(m, n, out)?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    /// Elementwise sum. `b` may also be a row vector broadcast over the rows
    /// of a 2-D `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) == self.shape(b) {
            let value = self.zip_map(a, b, |x, y| x + y);
            return self.push("add", value, Op::Add { a, b, broadcast: false }, &[a, b]);
        }
        let (m, n) = self.value(a).require_rank2("add")?;
        let bias = self.value(b);
        if bias.len() != n || bias.rows() != 1 {
            return Err(Error::invalid(format!(
                "add: cannot broadcast {:?} onto {:?}",
                bias.shape(),
                self.shape(a)
            )));
        }
        let mut data = self.value(a).data().to_vec();
        for r in 0..m {
            for (x, &y) in data[r * n..(r + 1) * n].iter_mut().zip(bias.data()) {
                *x = *x + y;
            }
        }
        let value = Tensor::matrix(m, n, data)?;
        self.push("add", value, Op::Add { a, b, broadcast: true }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_map(a, b, |x, y| x - y);
        self.push("sub", value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_map(a, b, |x, y| x * y);
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let value = self.value(a).map(|x| x * factor);
        self.push("scale", value, Op::Scale(a, factor), &[a])
    }

    /// Adds a constant to every element.
    pub fn shift(&mut self, a: Var, offset: T) -> Result<Var> {
        let value = self.value(a).map(|x| x + offset);
        self.push("shift", value, Op::Shift(a), &[a])
    }

    /// Joins 2-D tensors along `axis` (0 stacks rows, 1 joins columns).
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::invalid("concat: no inputs"));
        }
        if axis > 1 {
            return Err(Error::invalid("concat: axis must be 0 or 1"));
        }
        let mut dims = Vec::with_capacity(inputs.len());
        for &v in inputs {
            dims.push(self.value(v).require_rank2("concat")?);
        }
        let value = if axis == 0 {
            let cols = dims[0].1;
            if dims.iter().any(|d| d.1 != cols) {
                return Err(Error::invalid("concat: column counts differ"));
            }
            let rows = dims.iter().map(|d| d.0).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for &v in inputs {
                data.extend_from_slice(self.value(v).data());
            }
            Tensor::matrix(rows, cols, data)?
        } else {
            let rows = dims[0].0;
            if dims.iter().any(|d| d.0 != rows) {
                return Err(Error::invalid("concat: row counts differ"));
            }
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for &v in inputs {
                    data.extend_from_slice(self.value(v).row_slice(r));
                }
            }
            Tensor::matrix(rows, cols, data)?
        };
        let op = Op::Concat {
            inputs: inputs.to_vec(),
            axis,
        };
        self.push("concat", value, op, inputs)
    }

    /// `len` rows (axis 0) or columns (axis 1) starting at `start`.
    pub fn slice(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.value(input).require_rank2("slice")?;
        let extent = match axis {
            0 => m,
            1 => n,
            _ => return Err(Error::invalid("slice: axis must be 0 or 1")),
        };
        if start + len > extent || len == 0 {
            return Err(Error::invalid(format!(
                "slice: range {start}..{} out of bounds for extent {extent}",
                start + len
            )));
        }
        let src = self.value(input);
        let value = if axis == 0 {
            Tensor::matrix(len, n, src.data()[start * n..(start + len) * n].to_vec())?
        } else {
            let mut data = Vec::with_capacity(m * len);
            for r in 0..m {
                data.extend_from_slice(&src.row_slice(r)[start..start + len]);
            }
            Tensor::matrix(m, len, data)?
        };
        self.push("slice", value, Op::Slice { input, axis, start }, &[input])
    }

    pub fn transpose(&mut self, input: Var) -> Result<Var> {
        let (m, n) = self.value(input).require_rank2("transpose")?;
        let src = self.value(input).data();
        let mut data = vec![T::zero(); m * n];
        for r in 0..m {
            for c in 0..n {
                data[c * m + r] = src[r * n + c];
            }
        }
        let value = Tensor::matrix(n, m, data)?;
        self.push("transpose", value, Op::Transpose(input), &[input])
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes row `i`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (m, n) = self.value(table).require_rank2("gather_rows")?;
        if ids.is_empty() {
            return Err(Error::invalid("gather_rows: no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= m) {
            return Err(Error::invalid(format!(
                "gather_rows: id {bad} out of range for {m} rows"
            )));
        }
        let src = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * n);
        for &i in ids {
            data.extend_from_slice(src.row_slice(i));
        }
        let value = Tensor::matrix(ids.len(), n, data)?;
        let op = Op::GatherRows {
            table,
            ids: ids.to_vec(),
        };
        self.push("gather_rows", value, op, &[table])
    }

    fn reduce_with(&self, input: Var, axis: Axis, op: &str, f: impl Fn(&mut dyn Iterator<Item = T>) -> T) -> Result<Tensor<T>> {
        let src = self.value(input);
        match axis {
            Axis::All => Ok(Tensor::scalar(f(&mut src.data().iter().copied()))),
            Axis::Rows => {
                let (m, n) = src.require_rank2(op)?;
                let data = (0..n)
                    .map(|c| f(&mut (0..m).map(|r| src.data()[r * n + c])))
                    .collect();
                Tensor::matrix(1, n, data)
            }
            Axis::Cols => {
                let (m, _) = src.require_rank2(op)?;
                let data = (0..m)
                    .map(|r| f(&mut src.row_slice(r).iter().copied()))
                    .collect();
                Tensor::matrix(m, 1, data)
            }
        }
    }

    fn reduce_count(&self, input: Var, axis: Axis) -> usize {
        let t = self.value(input);
        match axis {
            Axis::All => t.len(),
            Axis::Rows => t.rows(),
            Axis::Cols => t.cols(),
        }
    }

    pub fn reduce_sum(&mut self, input: Var, axis: Axis) -> Result<Var> {
        let value = self.reduce_with(input, axis, "reduce_sum", &|it: &mut dyn Iterator<Item = T>| {
            it.fold(T::zero(), |a, b| a + b)
        })?;
        self.push("reduce_sum", value, Op::Sum(input, axis), &[input])
    }

    pub fn reduce_mean(&mut self, input: Var, axis: Axis) -> Result<Var> {
        let count = self.reduce_count(input, axis);
        if count == 0 {
            return Err(Error::invalid("reduce_mean over an empty extent"));
        }
        let denom = T::lit(count as f64);
        let value = self.reduce_with(input, axis, "reduce_mean", &|it: &mut dyn Iterator<Item = T>| {
            it.fold(T::zero(), |a, b| a + b) / denom
        })?;
        self.push("reduce_mean", value, Op::Mean(input, axis, count), &[input])
    }

    fn pick(&mut self, input: Var, axis: Axis, want_min: bool) -> Result<Var> {
        let name = if want_min { "reduce_min" } else { "reduce_max" };
        let src = self.value(input);
        if src.is_empty() {
            return Err(Error::invalid(format!("{name} over an empty tensor")));
        }
        // Index lists over the flat buffer, one per output element.
        let groups: Vec<Vec<usize>> = match axis {
            Axis::All => vec![(0..src.len()).collect()],
            Axis::Rows => {
                let (m, n) = src.require_rank2(name)?;
                (0..n).map(|c| (0..m).map(|r| r * n + c).collect()).collect()
            }
            Axis::Cols => {
                let (m, n) = src.require_rank2(name)?;
                (0..m).map(|r| (r * n..(r + 1) * n).collect()).collect()
            }
        };
        let mut arg = Vec::with_capacity(groups.len());
        let mut out = Vec::with_capacity(groups.len());
        for g in &groups {
            // Strict comparison keeps the lowest index on ties.
            let mut best = g[0];
            for &i in &g[1..] {
                let better = if want_min {
                    src.data()[i] < src.data()[best]
                } else {
                    src.data()[i] > src.data()[best]
                };
                if better {
                    best = i;
                }
            }
            arg.push(best);
            out.push(src.data()[best]);
        }
        let shape = match axis {
            Axis::All => vec![1, 1],
            Axis::Rows => vec![1, out.len()],
            Axis::Cols => vec![out.len(), 1],
        };
        let value = Tensor::new(shape, out)?;
        for &a in &arg {
            self.note_branch(a as u64);
        }
        self.push(name, value, Op::Pick { input, arg }, &[input])
    }

    /// Minimum with the whole gradient routed to the lowest-index argmin.
    pub fn reduce_min(&mut self, input: Var, axis: Axis) -> Result<Var> {
        self.pick(input, axis, true)
    }

    pub fn reduce_max(&mut self, input: Var, axis: Axis) -> Result<Var> {
        self.pick(input, axis, false)
    }

    fn pairwise(&mut self, a: Var, b: Var, want_min: bool) -> Result<Var> {
        let name = if want_min { "elementwise_min" } else { "elementwise_max" };
        self.same_shape(name, a, b)?;
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let first: Vec<bool> = x
            .iter()
            .zip(y)
            .map(|(&p, &q)| if want_min { p <= q } else { p >= q })
            .collect();
        let data = x
            .iter()
            .zip(y)
            .zip(&first)
            .map(|((&p, &q), &f)| if f { p } else { q })
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        for &f in &first {
            self.note_branch(f as u64);
        }
        let op = if want_min {
            Op::EMin { a, b, first }
        } else {
            Op::EMax { a, b, first }
        };
        self.push(name, value, op, &[a, b])
    }

    /// Elementwise minimum; ties send the gradient to `a`.
    pub fn elementwise_min(&mut self, a: Var, b: Var) -> Result<Var> {
        self.pairwise(a, b, true)
    }

    /// Elementwise maximum; ties send the gradient to `a`.
    pub fn elementwise_max(&mut self, a: Var, b: Var) -> Result<Var> {
        self.pairwise(a, b, false)
    }

    /// Clamp to `[lo, hi]`; the gradient passes on the closed interval.
    pub fn clamp(&mut self, input: Var, lo: T, hi: T) -> Result<Var> {
        if !(lo <= hi) {
            return Err(Error::invalid("clamp: lo must not exceed hi"));
        }
        let src = self.value(input);
        let pass: Vec<bool> = src.data().iter().map(|&x| lo <= x && x <= hi).collect();
        let value = src.map(|x| x.max(lo).min(hi));
        let codes: Vec<u64> = src
            .data()
            .iter()
            .map(|&x| if x < lo { 0 } else if x > hi { 2 } else { 1 })
            .collect();
        for c in codes {
            self.note_branch(c);
        }
        self.push("clamp", value, Op::Clamp { input, pass }, &[input])
    }

    /// `max(0, x)`; the derivative at 0 is 0.
    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let src = self.value(input);
        let codes: Vec<u64> = src.data().iter().map(|&x| (x > T::zero()) as u64).collect();
        let value = src.map(|x| if x > T::zero() { x } else { T::zero() });
        for c in codes {
            self.note_branch(c);
        }
        self.push("relu", value, Op::Relu(input), &[input])
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let value = self.value(input).map(sigmoid);
        self.push("sigmoid", value, Op::Sigmoid(input), &[input])
    }

    pub fn tanh(&mut self, input: Var) -> Result<Var> {
        let value = self.value(input).map(|x| x.tanh());
        self.push("tanh", value, Op::Tanh(input), &[input])
    }

    pub fn softmax_rows(&mut self, input: Var) -> Result<Var> {
        let (m, n) = self.value(input).require_rank2("softmax_rows")?;
        let src = self.value(input).data();
        let mut data = vec![T::zero(); m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let top = row.iter().copied().fold(T::neg_infinity(), T::max);
            let out = &mut data[r * n..(r + 1) * n];
            let mut total = T::zero();
            for (o, &x) in out.iter_mut().zip(row) {
                *o = (x - top).exp();
                total = total + *o;
            }
            for o in out.iter_mut() {
                *o = *o / total;
            }
        }
        let value = Tensor::matrix(m, n, data)?;
        self.push("softmax_rows", value, Op::SoftmaxRows(input), &[input])
    }

    /// Sum of squares to a `1×1` scalar.
    pub fn squared_norm(&mut self, input: Var) -> Result<Var> {
        let total = self.value(input).data().iter().fold(T::zero(), |a, &x| a + x * x);
        self.push("squared_norm", Tensor::scalar(total), Op::SquaredNorm(input), &[input])
    }

    /// Inverted dropout with a caller-supplied generator. `rate == 0` is the
    /// identity.
    pub fn dropout_mask<R: Rng + ?Sized>(&mut self, input: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} not in [0, 1)")));
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let n = self.value(input).len();
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if rate > 0.0 && rng.gen::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let src = self.value(input);
        let data = src.data().iter().zip(&mask).map(|(&x, &k)| x * k).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        self.push("dropout_mask", value, Op::Dropout { input, mask }, &[input])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        let mut send = |target: Var, contribution: Tensor<T>| {
            if !self.nodes[target.0].requires_grad {
                return;
            }
            match &mut grads[target.0] {
                Some(acc) => acc.add_assign(&contribution),
                slot @ None => *slot = Some(contribution),
            }
        };
        let elementwise = |src: &Tensor<T>, f: &dyn Fn(usize, T) -> T| -> Tensor<T> {
            let data = g.data().iter().enumerate().map(|(i, &gi)| f(i, gi)).collect();
            Tensor::new(src.shape().to_vec(), data).expect("shape preserved")
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = bv.cols();
                if self.nodes[a.0].requires_grad {
                    let da = gemm(g.data(), bv.data(), m, n, k, false, true);
                    send(*a, Tensor::matrix(m, k, da).expect("shape"));
                }
                if self.nodes[b.0].requires_grad {
                    let db = gemm(av.data(), g.data(), k, m, n, true, false);
                    send(*b, Tensor::matrix(k, n, db).expect("shape"));
                }
            }
            Op::Add { a, b, broadcast } => {
                send(*a, g.clone());
                if *broadcast {
                    let bv = self.value(*b);
                    let n = bv.len();
                    let mut acc = vec![T::zero(); n];
                    for r in 0..g.rows() {
                        for (s, &x) in acc.iter_mut().zip(g.row_slice(r)) {
                            *s = *s + x;
                        }
                    }
                    send(*b, Tensor::new(bv.shape().to_vec(), acc).expect("shape"));
                } else {
                    send(*b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                send(*a, elementwise(av, &|i, gi| gi * bv.data()[i]));
                send(*b, elementwise(bv, &|i, gi| gi * av.data()[i]));
            }
            Op::Scale(a, factor) => send(*a, g.map(|x| x * *factor)),
            Op::Shift(a) => send(*a, g.clone()),
            Op::Concat { inputs, axis } => {
                if *axis == 0 {
                    let mut row = 0;
                    for &v in inputs {
                        let t = self.value(v);
                        let (r, c) = (t.rows(), t.cols());
                        let part = g.data()[row * c..(row + r) * c].to_vec();
                        send(v, Tensor::matrix(r, c, part).expect("shape"));
                        row += r;
                    }
                } else {
                    let mut col = 0;
                    for &v in inputs {
                        let t = self.value(v);
                        let (r, c) = (t.rows(), t.cols());
                        let mut part = Vec::with_capacity(r * c);
                        for i in 0..r {
                            part.extend_from_slice(&g.row_slice(i)[col..col + c]);
                        }
                        send(v, Tensor::matrix(r, c, part).expect("shape"));
                        col += c;
                    }
                }
            }
            Op::Slice { input, axis, start } => {
                let src = self.value(*input);
                let (m, n) = (src.rows(), src.cols());
                let mut full = Tensor::zeros(&[m, n]);
                if *axis == 0 {
                    full.data_mut()[start * n..start * n + g.len()].copy_from_slice(g.data());
                } else {
                    let len = g.cols();
                    for r in 0..m {
                        full.row_slice_mut(r)[*start..start + len].copy_from_slice(g.row_slice(r));
                    }
                }
                send(*input, full);
            }
            Op::Transpose(input) => {
                let (m, n) = (g.rows(), g.cols());
                let mut data = vec![T::zero(); m * n];
                for r in 0..m {
                    for c in 0..n {
                        data[c * m + r] = g.data()[r * n + c];
                    }
                }
                send(*input, Tensor::matrix(n, m, data).expect("shape"));
            }
            Op::GatherRows { table, ids } => {
                let t = self.value(*table);
                let mut full = Tensor::zeros(t.shape());
                for (i, &id) in ids.iter().enumerate() {
                    let src = g.row_slice(i);
                    for (d, &s) in full.row_slice_mut(id).iter_mut().zip(src) {
                        *d = *d + s;
                    }
                }
                send(*table, full);
            }
            Op::Sum(input, axis) | Op::Mean(input, axis, _) => {
                let scale = match &node.op {
                    Op::Mean(_, _, count) => T::one() / T::lit(*count as f64),
                    _ => T::one(),
                };
                let src = self.value(*input);
                let n = src.cols();
                let data = (0..src.len())
                    .map(|i| {
                        let gi = match axis {
                            Axis::All => g.data()[0],
                            Axis::Rows => g.data()[i % n],
                            Axis::Cols => g.data()[i / n],
                        };
                        gi * scale
                    })
                    .collect();
                send(*input, Tensor::new(src.shape().to_vec(), data).expect("shape"));
            }
            Op::Pick { input, arg } => {
                let src = self.value(*input);
                let mut full = Tensor::zeros(src.shape());
                for (o, &i) in arg.iter().enumerate() {
                    full.data_mut()[i] = full.data()[i] + g.data()[o];
                }
                send(*input, full);
            }
            Op::EMin { a, b, first } | Op::EMax { a, b, first } => {
                let av = self.value(*a);
                send(*a, elementwise(av, &|i, gi| if first[i] { gi } else { T::zero() }));
                send(*b, elementwise(av, &|i, gi| if first[i] { T::zero() } else { gi }));
            }
            Op::Clamp { input, pass } => {
                let src = self.value(*input);
                send(*input, elementwise(src, &|i, gi| if pass[i] { gi } else { T::zero() }));
            }
            Op::Relu(input) => {
                let src = self.value(*input);
                send(
                    *input,
                    elementwise(src, &|i, gi| if src.data()[i] > T::zero() { gi } else { T::zero() }),
                );
            }
            Op::Sigmoid(input) => {
                let src = self.value(*input);
                send(*input, elementwise(src, &|i, gi| {
                    let s = y.data()[i];
                    gi * s * (T::one() - s)
                }));
            }
            Op::Tanh(input) => {
                let src = self.value(*input);
                let sign = match self.fault {
                    Some(InjectedFault::TanhBackwardSign) => -T::one(),
                    None => T::one(),
                };
                send(*input, elementwise(src, &|i, gi| {
                    let t = y.data()[i];
                    sign * gi * (T::one() - t * t)
                }));
            }
            Op::SoftmaxRows(input) => {
                let (m, n) = (y.rows(), y.cols());
                let mut data = vec![T::zero(); m * n];
                for r in 0..m {
                    let yr = y.row_slice(r);
                    let gr = g.row_slice(r);
                    let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&p, &q)| a + p * q);
                    for c in 0..n {
                        data[r * n + c] = yr[c] * (gr[c] - dot);
                    }
                }
                send(*input, Tensor::matrix(m, n, data).expect("shape"));
            }
            Op::SquaredNorm(input) => {
                let src = self.value(*input);
                let g0 = g.data()[0];
                let two = T::lit(2.0);
                send(*input, src.map(|x| two * x * g0));
            }
            Op::Dropout { input, mask } => {
                let src = self.value(*input);
                send(*input, elementwise(src, &|i, gi| gi * mask[i]));
            }
        }
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Gradients produced by one backward sweep.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(1, 3, &[0.0, 0.0, 0.0]));
        let y = g.softmax_rows(x).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn relu_value_and_gradient_mask() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(1, 3, &[-1.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = g.reduce_sum(y, Axis::All).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn squared_norm_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(1, 2, &[1.0, 2.0]));
        let y = g.squared_norm(x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn sum_of_matvec_gradient_is_outer_product() {
        let mut g = Graph::<f64>::new();
        let w = g.param(t(2, 3, &[0.1, -0.2, 0.3, 0.4, 0.5, -0.6]));
        let x = g.constant(t(3, 1, &[1.0, 2.0, 3.0]));
        let y = g.matmul(w, x).unwrap();
        let s = g.reduce_sum(y, Axis::All).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn gather_gradient_equals_one_hot_matmul() {
        let table = t(4, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let ids = [2usize, 0, 2, 3];
        let upstream = t(4, 2, &[0.5, -1.0, 2.0, 0.25, 1.5, 3.0, -0.5, 1.0]);

        let mut g = Graph::<f64>::new();
        let tv = g.param(table.clone());
        let rows = g.gather_rows(tv, &ids).unwrap();
        let w = g.constant(upstream.clone());
        let prod = g.mul(rows, w).unwrap();
        let s = g.reduce_sum(prod, Axis::All).unwrap();
        let sparse = g.backward(s).unwrap().get(tv).unwrap().clone();

        let mut h = Graph::<f64>::new();
        let tv2 = h.param(table);
        let mut onehot = vec![0.0; 4 * 4];
        for (i, &id) in ids.iter().enumerate() {
            onehot[i * 4 + id] = 1.0;
        }
        let oh = h.constant(t(4, 4, &onehot));
        let rows2 = h.matmul(oh, tv2).unwrap();
        assert_eq!(h.value(rows2), g.value(rows));
        let w2 = h.constant(upstream);
        let prod2 = h.mul(rows2, w2).unwrap();
        let s2 = h.reduce_sum(prod2, Axis::All).unwrap();
        let dense = h.backward(s2).unwrap().get(tv2).unwrap().clone();
        assert_eq!(sparse, dense);
        // Row 2 appears twice and accumulates both upstream rows.
        assert_eq!(sparse.row_slice(2), &[0.5 + 1.5, -1.0 + 3.0]);
    }

    #[test]
    fn reduce_min_routes_to_lowest_tied_index() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(1, 4, &[3.0, 1.0, 1.0, 2.0]));
        let m = g.reduce_min(x, Axis::All).unwrap();
        assert_eq!(g.value(m).item(), 1.0);
        let grads = g.backward(m).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn elementwise_ties_go_to_first_argument() {
        let mut g = Graph::<f64>::new();
        let a = g.param(t(1, 2, &[1.0, 2.0]));
        let b = g.param(t(1, 2, &[1.0, 0.0]));
        let m = g.elementwise_max(a, b).unwrap();
        let s = g.reduce_sum(m, Axis::All).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn shape_errors_and_scalar_loss() {
        let mut g = Graph::<f64>::new();
        let a = g.param(t(2, 3, &[0.0; 6]));
        let b = g.param(t(2, 3, &[0.0; 6]));
        assert!(matches!(g.matmul(a, b), Err(Error::InvalidArgument(_))));
        let c = g.param(t(3, 2, &[0.0; 6]));
        assert!(g.sub(a, c).is_err());
        assert!(g.gather_rows(a, &[5]).is_err());
        assert!(g.backward(a).is_err());
    }

    #[test]
    fn non_finite_forward_is_a_numeric_fault() {
        let mut g = Graph::<f64>::new();
        let a = g.param(t(1, 1, &[f64::MAX]));
        let err = g.scale(a, 10.0).unwrap_err();
        assert!(matches!(err, Error::NumericFault { op: "scale" }));
    }

    #[test]
    fn dropout_zero_rate_is_identity_and_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::<f64>::new();
        let x = g.param(t(1, 4, &[1.0, 2.0, 3.0, 4.0]));
        let y = g.dropout_mask(x, 0.0, &mut rng).unwrap();
        assert_eq!(g.value(y), g.value(x));

        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::<f64>::new();
            let x = g.param(t(1, 64, &[1.0; 64]));
            let y = g.dropout_mask(x, 0.5, &mut rng).unwrap();
            g.value(y).clone()
        };
        assert_eq!(run(9), run(9));
        let kept = run(9).data().iter().filter(|&&v| v > 0.0).count();
        assert!(kept > 10 && kept < 54);
        assert!(run(9).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn replay_is_bitwise_identical() {
        let build = || {
            let mut g = Graph::<f32>::new();
            let w = g.param(Tensor::matrix(3, 3, (0..9).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap());
            let x = g.constant(Tensor::matrix(2, 3, vec![0.3, -0.1, 0.7, 1.1, 0.2, -0.5]).unwrap());
            let h = g.matmul(x, w).unwrap();
            let h = g.tanh(h).unwrap();
            let p = g.softmax_rows(h).unwrap();
            let s = g.squared_norm(p).unwrap();
            let grads = g.backward(s).unwrap();
            (g.value(s).clone(), grads.get(w).unwrap().clone())
        };
        let (a, ga) = build();
        let (b, gb) = build();
        assert_eq!(a.data()[0].to_bits(), b.data()[0].to_bits());
        assert!(ga.data().iter().zip(gb.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
