//! Finite-difference verification of every differentiable primitive.
//!
//! The numeric side only ever runs forward passes, so it checks the backward
//! rules without sharing any of their code.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{BnMode, Graph, RunningStats, Var};
use crate::loss;
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor so near-zero gradients are compared absolutely.
const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct PrimitiveReport {
    pub primitive: &'static str,
    pub trials: usize,
    pub max_rel_error: f64,
}

impl PrimitiveReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

type Builder<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

fn eval(inputs: &[Tensor<f64>], build: &Builder<'_>) -> Result<f64> {
    let mut g = Graph::new();
    let vars = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect::<Result<Vec<_>>>()?;
    let out = build(&mut g, &vars)?;
    Ok(g.value(out).item())
}

/// Largest relative error between analytic and central-difference gradients
/// over every element of every input flagged in `check`.
pub fn check_gradients(inputs: &[Tensor<f64>], check: &[bool], build: &Builder<'_>) -> Result<f64> {
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .zip(check)
        .map(|(t, &rg)| g.leaf(t.clone(), rg))
        .collect::<Result<Vec<_>>>()?;
    let out = build(&mut g, &vars)?;
    g.backward(out)?;
    let mut worst: f64 = 0.0;
    for (i, (&v, &rg)) in vars.iter().zip(check).enumerate() {
        if !rg {
            continue;
        }
        let analytic = g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            let numeric = (eval(&plus, build)? - eval(&minus, build)?) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic.data()[j], numeric));
        }
    }
    Ok(worst)
}

fn normal_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero so ReLU kinks stay outside the stencil.
fn off_kink(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn prob_rows(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let mut t = Tensor::from_fn(&[rows, cols], |_| rng.random_range(0.01..1.0));
    for r in 0..rows {
        let s: f64 = t.row(r).iter().sum();
        t.row_mut(r).iter_mut().for_each(|v| *v /= s);
    }
    t
}

fn project(g: &mut Graph<f64>, y: Var, weights: &Tensor<f64>) -> Result<Var> {
    g.weighted_sum(y, weights.clone())
}

fn trial(name: &'static str, rng: &mut ChaCha8Rng) -> Result<f64> {
    match name {
        "dense" => {
            let (b, i, o) = (rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..5));
            let inputs = [normal_tensor(rng, &[b, i]), normal_tensor(rng, &[o, i]), normal_tensor(rng, &[o])];
            let w = normal_tensor(rng, &[b, o]);
            check_gradients(&inputs, &[true; 3], &|g, v| {
                let y = g.dense(v[0], v[1], Some(v[2]))?;
                project(g, y, &w)
            })
        }
        "conv2d" => {
            let (b, c, o) = (rng.random_range(1..3), rng.random_range(1..3), rng.random_range(1..3));
            let (h, wd) = (rng.random_range(3..6), rng.random_range(3..6));
            let k = rng.random_range(1..4);
            let stride = rng.random_range(1..3);
            let pad = rng.random_range(0..2);
            let inputs = [normal_tensor(rng, &[b, c, h, wd]), normal_tensor(rng, &[o, c, k, k])];
            let (oh, ow) = ((h + 2 * pad - k) / stride + 1, (wd + 2 * pad - k) / stride + 1);
            let w = normal_tensor(rng, &[b, o, oh, ow]);
            check_gradients(&inputs, &[true; 2], &|g, v| {
                let y = g.conv2d(v[0], v[1], stride, pad)?;
                project(g, y, &w)
            })
        }
        "relu" => {
            let shape = [rng.random_range(1..4), rng.random_range(1..6)];
            let inputs = [off_kink(rng, &shape)];
            let w = normal_tensor(rng, &shape);
            check_gradients(&inputs, &[true], &|g, v| {
                let y = g.relu(v[0])?;
                project(g, y, &w)
            })
        }
        "batch_norm_train" | "batch_norm_frozen" => {
            let frozen = name == "batch_norm_frozen";
            let (b, c, h) = (rng.random_range(2..4), rng.random_range(1..3), rng.random_range(1..3));
            let shape = [b, c, h, h];
            let inputs = [
                normal_tensor(rng, &shape),
                Tensor::from_fn(&[c], |_| rng.random_range(0.5..1.5)),
                normal_tensor(rng, &[c]),
            ];
            let stats = RunningStats {
                mean: (0..c).map(|_| rng.random_range(-0.5..0.5)).collect(),
                var: (0..c).map(|_| rng.random_range(0.5..1.5)).collect(),
            };
            let w = normal_tensor(rng, &shape);
            let mode = if frozen { BnMode::TrainFrozenStats } else { BnMode::Train };
            check_gradients(&inputs, &[true; 3], &|g, v| {
                let mut s = stats.clone();
                let y = g.batch_norm(v[0], v[1], v[2], &mut s, mode)?;
                project(g, y, &w)
            })
        }
        "global_avg_pool" => {
            let shape = [
                rng.random_range(1..3),
                rng.random_range(1..4),
                rng.random_range(1..4),
                rng.random_range(1..4),
            ];
            let inputs = [normal_tensor(rng, &shape)];
            let w = normal_tensor(rng, &shape[..2]);
            check_gradients(&inputs, &[true], &|g, v| {
                let y = g.global_avg_pool(v[0])?;
                project(g, y, &w)
            })
        }
        "concat" => {
            let b = rng.random_range(1..3);
            let (d1, d2) = (rng.random_range(1..5), rng.random_range(1..5));
            let inputs = [normal_tensor(rng, &[b, d1]), normal_tensor(rng, &[b, d2])];
            let w = normal_tensor(rng, &[b, d1 + d2]);
            check_gradients(&inputs, &[true; 2], &|g, v| {
                let y = g.concat(&[v[0], v[1]], 1)?;
                project(g, y, &w)
            })
        }
        "add" => {
            let shape = [rng.random_range(1..4), rng.random_range(1..4)];
            let inputs = [normal_tensor(rng, &shape), normal_tensor(rng, &shape)];
            let w = normal_tensor(rng, &shape);
            check_gradients(&inputs, &[true; 2], &|g, v| {
                let s = g.add(v[0], v[1])?;
                let y = g.add(s, v[0])?;
                project(g, y, &w)
            })
        }
        "softmax_cross_entropy" => {
            let (b, c) = (rng.random_range(1..4), rng.random_range(2..6));
            let logits = normal_tensor(rng, &[b, c]).map(|v| 3.0 * v);
            let targets = prob_rows(rng, b, c);
            check_gradients(&[logits], &[true], &|g, v| g.softmax_cross_entropy(v[0], targets.clone()))
        }
        "distillation_loss" => {
            let (b, c) = (rng.random_range(1..4), rng.random_range(2..6));
            let tau = [0.5, 1.0, 2.0, 4.0][rng.random_range(0..4)];
            let student = normal_tensor(rng, &[b, c]).map(|v| 3.0 * v);
            let teacher = normal_tensor(rng, &[b, c]).map(|v| 3.0 * v);
            check_gradients(&[student], &[true], &|g, v| loss::distillation_loss(g, v[0], &teacher, tau))
        }
        "two_layer_net" => {
            let (b, i, h, c) = (
                rng.random_range(1..4),
                rng.random_range(2..5),
                rng.random_range(2..5),
                rng.random_range(2..4),
            );
            let inputs = [
                normal_tensor(rng, &[b, i]),
                normal_tensor(rng, &[h, i]),
                off_kink(rng, &[h]),
                normal_tensor(rng, &[c, h]),
                normal_tensor(rng, &[c]),
            ];
            let targets = prob_rows(rng, b, c);
            // the ReLU input must stay off its kink under the perturbation;
            // reject draws where it does not
            let mut g = Graph::new();
            let vs = inputs.iter().map(|t| g.constant(t.clone())).collect::<Result<Vec<_>>>()?;
            let pre = g.dense(vs[0], vs[1], Some(vs[2]))?;
            if g.value(pre).data().iter().any(|v| v.abs() < 1e-3) {
                return Ok(0.0);
            }
            check_gradients(&inputs, &[true; 5], &|g, v| {
                let hdn = g.dense(v[0], v[1], Some(v[2]))?;
                let hdn = g.relu(hdn)?;
                let out = g.dense(hdn, v[3], Some(v[4]))?;
                g.softmax_cross_entropy(out, targets.clone())
            })
        }
        other => unreachable!("unknown primitive {other}"),
    }
}

pub const PRIMITIVES: &[&str] = &[
    "dense",
    "conv2d",
    "relu",
    "batch_norm_train",
    "batch_norm_frozen",
    "global_avg_pool",
    "concat",
    "add",
    "softmax_cross_entropy",
    "distillation_loss",
    "two_layer_net",
];

/// Run `trials` randomized cases for every primitive.
pub fn run_suite(trials: usize, seed: u64) -> Result<Vec<PrimitiveReport>> {
    PRIMITIVES
        .iter()
        .enumerate()
        .map(|(k, &name)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((k as u64 + 1) << 32));
            let mut worst: f64 = 0.0;
            for _ in 0..trials {
                worst = worst.max(trial(name, &mut rng)?);
            }
            Ok(PrimitiveReport {
                primitive: name,
                trials,
                max_rel_error: worst,
            })
        })
        .collect()
}
