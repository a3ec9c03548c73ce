//! Central finite differences, used to check analytic gradients.
//!
//! Only forward evaluations are used here, so the check is independent of
//! the backward kernels.

use crate::error::Result;
use crate::lstm::{self, LstmVars};
use crate::ops::BN_EPSILON;
use crate::params::{Gradients, ParamStore};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
/// Maximum accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor so that near-zero gradients are compared absolutely.
pub const FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn numeric_gradient(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + STEP;
            let plus = f(&probe);
            probe[i] = orig - STEP;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * STEP)
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckReport {
    pub checked: usize,
    pub max_relative_error: f64,
    pub worst: Option<(String, usize)>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_relative_error <= TOLERANCE
    }

    pub fn record(&mut self, name: &str, index: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if err > self.max_relative_error || self.worst.is_none() {
            self.max_relative_error = err;
            self.worst = Some((name.to_string(), index));
        }
    }

    pub fn merge(&mut self, other: CheckReport) {
        self.checked += other.checked;
        if other.max_relative_error > self.max_relative_error {
            self.max_relative_error = other.max_relative_error;
            self.worst = other.worst;
        }
    }
}

/// Compares `analytic` against finite differences of `loss` for every
/// scalar of every parameter. `loss` must be a pure function of the store.
pub fn check_params(
    store: &ParamStore<f64>,
    analytic: &Gradients<f64>,
    mut loss: impl FnMut(&ParamStore<f64>) -> f64,
) -> CheckReport {
    let mut report = CheckReport::default();
    let mut probe = store.clone();
    for id in store.ids() {
        let name = store.name(id).to_string();
        for k in 0..store.get(id).len() {
            let orig = probe.get(id).data()[k];
            probe.get_mut(id).data_mut()[k] = orig + STEP;
            let plus = loss(&probe);
            probe.get_mut(id).data_mut()[k] = orig - STEP;
            let minus = loss(&probe);
            probe.get_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[k]);
            report.record(&name, k, a, numeric);
        }
    }
    report
}

/// Checks gradients with respect to graph inputs. `build` records a scalar
/// loss from one input var per tensor, in order.
pub fn check_tensors(
    inputs: &[(&str, Tensor<f64>)],
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<CheckReport> {
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.input(t.clone())).collect();
        let root = build(&mut tape, &vars)?;
        Ok(tape.value(root).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|(_, t)| tape.input_with_grad(t.clone()))
        .collect();
    let root = build(&mut tape, &vars)?;
    let (_, grads) = tape.backward_with_inputs(root)?;

    let mut values: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut report = CheckReport::default();
    for (slot, (name, _)) in inputs.iter().enumerate() {
        let analytic = grads.iter().find(|(v, _)| *v == vars[slot]).map(|(_, g)| g);
        for k in 0..values[slot].len() {
            let orig = values[slot].data()[k];
            values[slot].data_mut()[k] = orig + STEP;
            let plus = eval(&values)?;
            values[slot].data_mut()[k] = orig - STEP;
            let minus = eval(&values)?;
            values[slot].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            report.record(name, k, analytic.map_or(0.0, |g| g.data()[k]), numeric);
        }
    }
    Ok(report)
}

fn random(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.range(-scale, scale))
}

/// `sum(y * r)` for a fixed random `r`, so every output element carries a
/// distinct weight in the loss.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = tape.input(weights.clone());
    let prod = tape.mul(y, w)?;
    Ok(tape.sum(prod))
}

/// One randomized gradient check per layer kind per trial. Returns the
/// merged report for each layer.
pub fn layer_suite(trials: usize, seed: u64) -> Result<Vec<(&'static str, CheckReport)>> {
    let mut rng = Rng::new(seed);
    let mut out: Vec<(&'static str, CheckReport)> = ["conv2d", "batchnorm", "maxpool", "dense", "lstm", "sigmoid-head"]
        .into_iter()
        .map(|n| (n, CheckReport::default()))
        .collect();
    for _ in 0..trials {
        // conv2d
        let n = 1 + rng.below(2);
        let c = 1 + rng.below(3);
        let h = 4 + rng.below(4);
        let w = 4 + rng.below(4);
        let k = 1 + rng.below(3);
        let kh = 1 + rng.below(3);
        let kw = 1 + rng.below(3);
        let stride = 1 + rng.below(2);
        let pad = rng.below(2);
        let x = random(&mut rng, &[n, c, h, w], 1.0);
        let kern = random(&mut rng, &[k, c, kh, kw], 0.5);
        let bias = random(&mut rng, &[k], 0.5);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let r = random(&mut rng, &[n, k, oh, ow], 1.0);
        out[0].1.merge(check_tensors(
            &[("input", x), ("kernel", kern), ("bias", bias)],
            |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], stride, pad)?;
                weighted_sum(t, y, &r)
            },
        )?);

        // batch norm (training mode)
        let n = 2 + rng.below(3);
        let c = 1 + rng.below(3);
        let s = 1 + rng.below(4);
        let x = random(&mut rng, &[n, c, s, s], 1.0);
        let gamma = random(&mut rng, &[c], 1.0);
        let beta = random(&mut rng, &[c], 1.0);
        let r = random(&mut rng, &[n, c, s, s], 1.0);
        out[1].1.merge(check_tensors(
            &[("input", x), ("gamma", gamma), ("beta", beta)],
            |t, v| {
                let (y, _) = t.batchnorm_train(v[0], v[1], v[2], BN_EPSILON)?;
                weighted_sum(t, y, &r)
            },
        )?);

        // max pool: well-separated values keep the argmax stable under +-STEP
        let c = 1 + rng.below(3);
        let h = 2 + rng.below(5);
        let w = 2 + rng.below(5);
        let count = c * h * w;
        let mut order: Vec<usize> = (0..count).collect();
        rng.shuffle(&mut order);
        let x = Tensor::new(
            [1, c, h, w],
            order.iter().map(|&o| o as f64 * 0.1 + rng.range(0.0, 0.01)).collect(),
        )?;
        let r = random(&mut rng, &[1, c, h / 2, w / 2], 1.0);
        out[2].1.merge(check_tensors(&[("input", x)], |t, v| {
            let y = t.maxpool2d(v[0])?;
            weighted_sum(t, y, &r)
        })?);

        // dense
        let n = 1 + rng.below(3);
        let i = 1 + rng.below(5);
        let o = 1 + rng.below(4);
        let x = random(&mut rng, &[n, i], 1.0);
        let wt = random(&mut rng, &[o, i], 1.0);
        let b = random(&mut rng, &[o], 1.0);
        let r = random(&mut rng, &[n, o], 1.0);
        out[3].1.merge(check_tensors(
            &[("input", x), ("weight", wt), ("bias", b)],
            |t, v| {
                let y = t.dense(v[0], v[1], v[2])?;
                weighted_sum(t, y, &r)
            },
        )?);

        // LSTM unrolled over a few steps
        let n = 1 + rng.below(2);
        let i = 1 + rng.below(3);
        let hs = 1 + rng.below(3);
        let steps = 2 + rng.below(2);
        let xs = random(&mut rng, &[steps * n, i], 1.0);
        let w_in = random(&mut rng, &[4 * hs, i], 0.7);
        let w_h = random(&mut rng, &[4 * hs, hs], 0.7);
        let b = random(&mut rng, &[4 * hs], 0.5);
        let h0 = random(&mut rng, &[n, hs], 0.5);
        let c0 = random(&mut rng, &[n, hs], 0.5);
        let r = random(&mut rng, &[n, hs], 1.0);
        out[4].1.merge(check_tensors(
            &[
                ("inputs", xs),
                ("w_input", w_in),
                ("w_hidden", w_h),
                ("bias", b),
                ("h0", h0),
                ("c0", c0),
            ],
            |t, v| {
                let lw = LstmVars {
                    w_input: v[1],
                    w_hidden: v[2],
                    bias: v[3],
                    hidden: hs,
                };
                let (mut h, mut c) = (v[4], v[5]);
                for step in 0..steps {
                    let rows: Vec<usize> = (0..n).map(|b| step * n + b).collect();
                    let x = t.gather_rows(v[0], &rows)?;
                    (h, c) = lstm::lstm_step(t, x, h, c, lw)?;
                }
                let both = t.add(h, c)?;
                weighted_sum(t, both, &r)
            },
        )?);

        // dense -> sigmoid -> mean absolute error, as used by every stream head
        let n = 1 + rng.below(4);
        let i = 1 + rng.below(5);
        let x = random(&mut rng, &[n, i], 1.0);
        let wt = random(&mut rng, &[1, i], 1.0);
        let b = random(&mut rng, &[1], 0.5);
        // targets far from reachable predictions keep |pred - target| off its kink
        let target = Tensor::from_fn([n, 1], |_| if rng.bernoulli(0.5) { 1.5 } else { -0.5 });
        out[5].1.merge(check_tensors(
            &[("input", x), ("weight", wt), ("bias", b)],
            |t, v| {
                let z = t.dense(v[0], v[1], v[2])?;
                let s = t.sigmoid(z);
                t.l1_loss(s, &target)
            },
        )?);
    }
    Ok(out)
}
