//! Brute-force oracles shared by the metric tests and the acceptance run.
//! Each check draws random inputs, evaluates the library and a scalar-loop
//! oracle, and reports the largest deviation.

#![allow(dead_code)]

use echoqa::metrics::{
    class_error, depth_gain_profile, interobserver_disparity, model_accuracy, rms_contrast, Frame, Origin, Roi,
    ScorePair,
};
use echoqa::nn::ops::{self, Conv2dParams};
use echoqa::nn::rng::Rng;
use echoqa::nn::Tensor;

pub struct OracleResult {
    pub name: &'static str,
    pub cases: usize,
    pub max_deviation: f64,
    /// 0 for exact comparisons.
    pub tolerance: f64,
}

impl OracleResult {
    pub fn passed(&self) -> bool {
        self.max_deviation <= self.tolerance
    }
}

fn random_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.range(-1.0, 1.0))
}

fn random_frame(rng: &mut Rng, w: usize, h: usize) -> Frame {
    let px = (0..w * h).map(|_| rng.uniform() as f32).collect();
    Frame::new(w, h, px, Origin::Imported).unwrap()
}

pub fn conv2d(trials: usize, seed: u64) -> OracleResult {
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (n, c, k) = (1 + rng.below(2), 1 + rng.below(3), 1 + rng.below(3));
        let (h, w) = (3 + rng.below(8), 3 + rng.below(8));
        let (kh, kw) = (1 + rng.below(3), 1 + rng.below(3));
        let (stride, pad) = (1 + rng.below(3), rng.below(3));
        let x = random_tensor(&mut rng, &[n, c, h, w]);
        let kernel = random_tensor(&mut rng, &[k, c, kh, kw]);
        let bias = random_tensor(&mut rng, &[k]);
        let params = Conv2dParams {
            kernel: kernel.clone(),
            bias: bias.clone(),
        };
        let y = ops::conv2d(&x, &params, stride, pad).unwrap();
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        assert_eq!(y.shape(), &[n, k, oh, ow]);
        let (xd, kd, yd) = (x.data(), kernel.data(), y.data());
        for b in 0..n {
            for o in 0..k {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = bias.data()[o];
                        for ci in 0..c {
                            for m in 0..kh {
                                for q in 0..kw {
                                    let r = (i * stride + m) as isize - pad as isize;
                                    let s = (j * stride + q) as isize - pad as isize;
                                    if r < 0 || s < 0 || r >= h as isize || s >= w as isize {
                                        continue;
                                    }
                                    let xv = xd[((b * c + ci) * h + r as usize) * w + s as usize];
                                    acc += kd[((o * c + ci) * kh + m) * kw + q] * xv;
                                }
                            }
                        }
                        let got = yd[((b * k + o) * oh + i) * ow + j];
                        worst = worst.max((got - acc).abs());
                    }
                }
            }
        }
    }
    OracleResult {
        name: "conv2d",
        cases: trials,
        max_deviation: worst,
        tolerance: 1e-10,
    }
}

pub fn maxpool(trials: usize, seed: u64) -> OracleResult {
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (c, h, w) = (1 + rng.below(3), 2 + rng.below(9), 2 + rng.below(9));
        // integer-valued inputs with many ties
        let x = Tensor::from_fn(vec![c, h, w], |_| rng.below(5) as f64);
        let y = ops::maxpool2d(&x).unwrap();
        let (oh, ow) = (h / 2, w / 2);
        assert_eq!(y.shape(), &[c, oh, ow]);
        for p in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        best = best.max(x.data()[(p * h + 2 * i + di) * w + 2 * j + dj]);
                    }
                    worst = worst.max((y.data()[(p * oh + i) * ow + j] - best).abs());
                }
            }
        }
    }
    OracleResult {
        name: "maxpool",
        cases: trials,
        max_deviation: worst,
        tolerance: 0.0,
    }
}

pub fn rms(trials: usize, seed: u64) -> OracleResult {
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    for t in 0..trials {
        let (w, h) = if t == 0 { (8, 8) } else { (1 + rng.below(40), 1 + rng.below(40)) };
        let frame = random_frame(&mut rng, w, h);
        let roi = Roi {
            x: rng.below(w),
            y: rng.below(h),
            width: 0,
            height: 0,
        };
        let roi = Roi {
            width: 1 + rng.below(w - roi.x),
            height: 1 + rng.below(h - roi.y),
            ..roi
        };
        for r in [None, Some(roi)] {
            let region = r.unwrap_or(Roi { x: 0, y: 0, width: w, height: h });
            let mut sum = 0.0;
            for y in region.y..region.y + region.height {
                for x in region.x..region.x + region.width {
                    sum += frame.get(x, y) as f64;
                }
            }
            let n = (region.width * region.height) as f64;
            let mean = sum / n;
            let mut ss = 0.0;
            for y in region.y..region.y + region.height {
                for x in region.x..region.x + region.width {
                    ss += (frame.get(x, y) as f64 - mean).powi(2);
                }
            }
            let want = (ss / n).sqrt();
            worst = worst.max((rms_contrast(&frame, r).unwrap() - want).abs());
        }
    }
    OracleResult {
        name: "rms_contrast",
        cases: trials,
        max_deviation: worst,
        tolerance: 1e-10,
    }
}

pub fn band_variance(trials: usize, seed: u64) -> OracleResult {
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let bands = 1 + rng.below(6);
        let h = 2 * bands + rng.below(40);
        let w = 1 + rng.below(30);
        let frame = random_frame(&mut rng, w, h);
        let profile = depth_gain_profile(&frame, bands).unwrap();
        // row y belongs to the last band whose first row is at or above it
        let band_of = |y: usize| (0..bands).rev().find(|&b| b * h / bands <= y).unwrap();
        for b in 0..bands {
            let mut values = Vec::new();
            for y in 0..h {
                if band_of(y) == b {
                    for x in 0..w {
                        values.push(frame.get(x, y) as f64);
                    }
                }
            }
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
            worst = worst.max((profile.band_means[b] - mean).abs());
            worst = worst.max((profile.band_variances[b] - var).abs());
        }
    }
    OracleResult {
        name: "band variance",
        cases: trials,
        max_deviation: worst,
        tolerance: 1e-10,
    }
}

fn random_pairs(rng: &mut Rng, n: usize) -> (Vec<f64>, Vec<f64>) {
    (0..n).map(|_| (rng.uniform(), rng.uniform())).unzip()
}

pub fn class_error_and_accuracy(trials: usize, seed: u64) -> [OracleResult; 2] {
    let mut rng = Rng::new(seed);
    let (mut worst_err, mut worst_acc) = (0.0f64, 0.0f64);
    for t in 0..trials {
        let n = if t == 0 { 100 } else { 1 + rng.below(200) };
        let (gt, pred) = random_pairs(&mut rng, n);
        let pairs: Vec<ScorePair> = gt.iter().zip(&pred).map(|(g, p)| ScorePair::new(*g, *p).unwrap()).collect();
        let mut total = 0.0;
        for i in 0..n {
            total += if gt[i] > pred[i] { gt[i] - pred[i] } else { pred[i] - gt[i] };
        }
        let want = total / n as f64;
        worst_err = worst_err.max((class_error(&pairs).unwrap() - want).abs());
        worst_acc = worst_acc.max((model_accuracy(&pairs).unwrap() - (100.0 - 100.0 * want)).abs());
    }
    [
        OracleResult {
            name: "class_error",
            cases: trials,
            max_deviation: worst_err,
            tolerance: 1e-10,
        },
        OracleResult {
            name: "accuracy",
            cases: trials,
            max_deviation: worst_acc,
            tolerance: 1e-10,
        },
    ]
}

pub fn disparity(trials: usize, seed: u64) -> OracleResult {
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let n = 2 + rng.below(100);
        let (a, b) = random_pairs(&mut rng, n);
        let d = interobserver_disparity(&a, &b).unwrap();
        let diffs: Vec<f64> = (0..n).map(|i| (a[i] - b[i]).abs()).collect();
        let mean = diffs.iter().sum::<f64>() / n as f64;
        let var = diffs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        worst = worst.max((d.mean - mean).abs()).max((d.std - var.sqrt()).abs());
        assert_eq!(d.count, n);
    }
    OracleResult {
        name: "disparity",
        cases: trials,
        max_deviation: worst,
        tolerance: 1e-10,
    }
}

pub fn all(trials: usize, seed: u64) -> Vec<OracleResult> {
    let [err, acc] = class_error_and_accuracy(trials, seed + 4);
    vec![
        conv2d(trials, seed),
        maxpool(trials, seed + 1),
        rms(trials, seed + 2),
        band_variance(trials, seed + 3),
        err,
        acc,
        disparity(trials, seed + 5),
    ]
}
