//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Axis, Graph, InjectedFault, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FdStatus {
    Passed,
    Failed,
    /// The ±step probe crossed a non-differentiable boundary.
    Skipped,
}

#[derive(Debug, Clone)]
pub struct FdEntry {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    pub status: FdStatus,
}

#[derive(Debug, Clone, Default)]
pub struct FdReport {
    pub entries: Vec<FdEntry>,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.failed() == 0
    }

    pub fn failed(&self) -> usize {
        self.count(FdStatus::Failed)
    }

    pub fn skipped(&self) -> usize {
        self.count(FdStatus::Skipped)
    }

    pub fn checked(&self) -> usize {
        self.count(FdStatus::Passed) + self.failed()
    }

    fn count(&self, status: FdStatus) -> usize {
        self.entries.iter().filter(|e| e.status == status).count()
    }

    /// Largest relative error over checked coordinates.
    pub fn max_rel_error(&self) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.status != FdStatus::Skipped)
            .map(|e| e.rel_error)
            .fold(0.0, f64::max)
    }

    /// Indices of parameters with at least one failed coordinate.
    pub fn failed_params(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .entries
            .iter()
            .filter(|e| e.status == FdStatus::Failed)
            .map(|e| e.param)
            .collect();
        out.dedup();
        out
    }
}

/// Absolute error under which a coordinate passes regardless of scale.
pub const ABS_FLOOR: f64 = 1e-6;

/// Compares the analytic gradient of `f` with central differences for every
/// coordinate of every tensor in `params`.
pub fn finite_difference_check<F>(
    f: F,
    params: &[Tensor<f64>],
    step: f64,
    tolerance: f64,
) -> Result<FdReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    finite_difference_check_with(f, params, step, tolerance, None)
}

#[doc(hidden)]
pub fn finite_difference_check_with<F>(
    f: F,
    params: &[Tensor<f64>],
    step: f64,
    tolerance: f64,
    fault: Option<InjectedFault>,
) -> Result<FdReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let eval = |values: &[Tensor<f64>]| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok((g.value(out).item(), g.branch_signature()))
    };

    let mut g = Graph::new();
    if let Some(fault) = fault {
        g.inject_fault(fault);
    }
    let vars: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let base_sig = g.branch_signature();
    let grads = g.backward(out)?;

    let mut report = FdReport::default();
    let mut probe: Vec<Tensor<f64>> = params.to_vec();
    for (p, var) in vars.iter().enumerate() {
        let analytic_grad = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(params[p].shape()));
        for i in 0..params[p].len() {
            let orig = params[p].data()[i];
            probe[p].data_mut()[i] = orig + step;
            let (plus, sig_plus) = eval(&probe)?;
            probe[p].data_mut()[i] = orig - step;
            let (minus, sig_minus) = eval(&probe)?;
            probe[p].data_mut()[i] = orig;

            let analytic = analytic_grad.data()[i];
            let numeric = (plus - minus) / (2.0 * step);
            let abs = (analytic - numeric).abs();
            let rel_error = abs / analytic.abs().max(numeric.abs()).max(f64::MIN_POSITIVE);
            let status = if sig_plus != base_sig || sig_minus != base_sig {
                FdStatus::Skipped
            } else if abs <= ABS_FLOOR || rel_error < tolerance {
                FdStatus::Passed
            } else {
                FdStatus::Failed
            };
            report.entries.push(FdEntry {
                param: p,
                index: i,
                analytic,
                numeric,
                rel_error: if abs <= ABS_FLOOR { 0.0 } else { rel_error },
                status,
            });
        }
    }
    Ok(report)
}

type OpCase = (
    &'static str,
    Vec<Tensor<f64>>,
    Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>,
);

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).expect("shape")
}

/// Random projection to a scalar so that every output coordinate carries a
/// distinct weight.
fn project(g: &mut Graph<f64>, v: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(v).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|_| rng.gen_range(0.5..1.5)).collect())?;
    let w = g.constant(w);
    let prod = g.mul(v, w)?;
    g.reduce_sum(prod, Axis::All)
}

fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |m, n| random(&mut rng, m, n);
    vec![
        ("matmul", vec![r(3, 4), r(4, 2)], Box::new(|g, v| { let y = g.matmul(v[0], v[1])?; project(g, y, 1) })),
        ("add", vec![r(3, 4), r(3, 4)], Box::new(|g, v| { let y = g.add(v[0], v[1])?; project(g, y, 2) })),
        ("add_broadcast", vec![r(3, 4), r(1, 4)], Box::new(|g, v| { let y = g.add(v[0], v[1])?; project(g, y, 3) })),
        ("sub", vec![r(2, 3), r(2, 3)], Box::new(|g, v| { let y = g.sub(v[0], v[1])?; project(g, y, 4) })),
        ("mul", vec![r(2, 3), r(2, 3)], Box::new(|g, v| { let y = g.mul(v[0], v[1])?; project(g, y, 5) })),
        ("scale", vec![r(2, 3)], Box::new(|g, v| { let y = g.scale(v[0], -1.7)?; project(g, y, 6) })),
        ("shift", vec![r(2, 3)], Box::new(|g, v| { let y = g.shift(v[0], 0.4)?; let y = g.mul(y, y)?; project(g, y, 7) })),
        ("concat_rows", vec![r(2, 3), r(1, 3)], Box::new(|g, v| { let y = g.concat(&[v[0], v[1]], 0)?; project(g, y, 8) })),
        ("concat_cols", vec![r(2, 3), r(2, 2)], Box::new(|g, v| { let y = g.concat(&[v[0], v[1]], 1)?; project(g, y, 9) })),
        ("slice", vec![r(3, 5)], Box::new(|g, v| { let a = g.slice(v[0], 1, 1, 3)?; let b = g.slice(a, 0, 1, 2)?; project(g, b, 10) })),
        ("transpose", vec![r(2, 4)], Box::new(|g, v| { let y = g.transpose(v[0])?; project(g, y, 11) })),
        ("gather_rows", vec![r(4, 3)], Box::new(|g, v| { let y = g.gather_rows(v[0], &[3, 1, 3, 0])?; project(g, y, 12) })),
        ("reduce_sum", vec![r(3, 4)], Box::new(|g, v| {
            let a = g.reduce_sum(v[0], Axis::Rows)?; let b = g.reduce_sum(v[0], Axis::Cols)?;
            let a = project(g, a, 13)?; let b = project(g, b, 14)?; g.add(a, b)
        })),
        ("reduce_mean", vec![r(3, 4)], Box::new(|g, v| {
            let a = g.reduce_mean(v[0], Axis::Rows)?; let b = g.reduce_mean(v[0], Axis::All)?;
            let a = project(g, a, 15)?; g.add(a, b)
        })),
        ("reduce_min", vec![r(3, 4)], Box::new(|g, v| {
            let a = g.reduce_min(v[0], Axis::Rows)?; let b = g.reduce_min(v[0], Axis::All)?;
            let a = project(g, a, 16)?; g.add(a, b)
        })),
        ("reduce_max", vec![r(3, 4)], Box::new(|g, v| { let a = g.reduce_max(v[0], Axis::Cols)?; project(g, a, 17) })),
        ("elementwise_min", vec![r(2, 4), r(2, 4)], Box::new(|g, v| { let y = g.elementwise_min(v[0], v[1])?; project(g, y, 18) })),
        ("elementwise_max", vec![r(2, 4), r(2, 4)], Box::new(|g, v| { let y = g.elementwise_max(v[0], v[1])?; project(g, y, 19) })),
        ("clamp", vec![r(2, 5)], Box::new(|g, v| { let y = g.clamp(v[0], -0.5, 0.5)?; project(g, y, 20) })),
        ("relu", vec![r(2, 5)], Box::new(|g, v| { let y = g.relu(v[0])?; project(g, y, 21) })),
        ("sigmoid", vec![r(2, 4)], Box::new(|g, v| { let y = g.scale(v[0], 3.0)?; let y = g.sigmoid(y)?; project(g, y, 22) })),
        ("tanh", vec![r(2, 4)], Box::new(|g, v| { let y = g.scale(v[0], 2.0)?; let y = g.tanh(y)?; project(g, y, 23) })),
        ("softmax_rows", vec![r(3, 4)], Box::new(|g, v| { let y = g.scale(v[0], 2.0)?; let y = g.softmax_rows(y)?; project(g, y, 24) })),
        ("squared_norm", vec![r(2, 3)], Box::new(|g, v| g.squared_norm(v[0]))),
        ("dropout_mask", vec![r(2, 6)], Box::new(|g, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(25);
            let y = g.dropout_mask(v[0], 0.3, &mut rng)?;
            project(g, y, 26)
        })),
    ]
}

/// Runs the finite-difference check on every op with random smooth inputs.
pub fn op_gradient_suite(seed: u64, step: f64, tolerance: f64) -> Result<Vec<(&'static str, FdReport)>> {
    op_gradient_suite_with(seed, step, tolerance, None)
}

#[doc(hidden)]
pub fn op_gradient_suite_with(
    seed: u64,
    step: f64,
    tolerance: f64,
    fault: Option<InjectedFault>,
) -> Result<Vec<(&'static str, FdReport)>> {
    op_cases(seed)
        .into_iter()
        .map(|(name, params, f)| {
            let report = finite_difference_check_with(f, &params, step, tolerance, fault)?;
            Ok((name, report))
        })
        .collect()
}
