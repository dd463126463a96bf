//! Independent reference implementations used by tests.
//!
//! Nothing here shares code with the kernels it checks: convolution is a
//! direct bounds-checked summation, pooling a window scan, and gradients
//! come from central finite differences of the scalar objective.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{FluidParams, ParamSet, ParamUnit};
use crate::ops;
use crate::tensor::Tensor;

/// `out[n,o,i,j] = b[o] + Σ w[o,c,u,v]·x[n,c,i+u-1,j+v-1]` with zeros outside.
pub fn direct_conv2d(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (n, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let o = w.dim(0);
    let xs = |s: usize, ch: usize, i: isize, j: isize| -> f64 {
        if i < 0 || j < 0 || i >= h as isize || j >= wd as isize {
            0.0
        } else {
            x.data()[((s * c + ch) * h + i as usize) * wd + j as usize]
        }
    };
    let mut out = Tensor::zeros(&[n, o, h, wd]);
    for s in 0..n {
        for oc in 0..o {
            for i in 0..h {
                for j in 0..wd {
                    let mut acc = b.data()[oc];
                    for ch in 0..c {
                        for u in 0..3 {
                            for v in 0..3 {
                                let wv = w.data()[((oc * c + ch) * 3 + u) * 3 + v];
                                acc += wv * xs(s, ch, i as isize + u as isize - 1, j as isize + v as isize - 1);
                            }
                        }
                    }
                    out.data_mut()[((s * o + oc) * h + i) * wd + j] = acc;
                }
            }
        }
    }
    out
}

/// Exhaustive 2×2/stride-2 window maxima.
pub fn window_scan_maxpool(x: &Tensor<f64>) -> Tensor<f64> {
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    for p in 0..n * c {
        for i in 0..ho {
            for j in 0..wo {
                let mut m = f64::NEG_INFINITY;
                for di in 0..2 {
                    for dj in 0..2 {
                        m = m.max(x.data()[(p * h + 2 * i + di) * w + 2 * j + dj]);
                    }
                }
                out.data_mut()[(p * ho + i) * wo + j] = m;
            }
        }
    }
    out
}

/// Central differences of `f` at every coordinate of `at`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, at: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = at.to_vec();
    (0..at.len())
        .map(|k| {
            probe[k] = at[k] + eps;
            let up = f(&probe);
            probe[k] = at[k] - eps;
            let down = f(&probe);
            probe[k] = at[k];
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Relative error with a floor on the denominator so exact zeros compare cleanly.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

fn max_rel(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Values whose pairwise gaps and distance from zero exceed the probe step,
/// keeping max-pool and ReLU away from their kinks.
fn separated_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let len: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..len).map(|k| (k as f64 + 0.5) / len as f64 * 2.0 - 1.0).collect();
    for k in (1..len).rev() {
        vals.swap(k, rng.gen_range(0..=k));
    }
    let vals = vals
        .into_iter()
        .map(|v| if v.abs() < 1e-2 { v + 2e-2f64.copysign(v) } else { v })
        .collect();
    Tensor::new(shape.to_vec(), vals).expect("shape")
}

fn random_shape(rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize, usize) {
    (
        rng.gen_range(1..=2),
        rng.gen_range(1..=4),
        rng.gen_range(2..=6),
        rng.gen_range(2..=6),
        rng.gen_range(1..=4),
    )
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub kernel: &'static str,
    pub instance: usize,
    pub max_rel_err: f64,
}

pub const FD_EPS: f64 = 1e-4;

pub fn check_conv(rng: &mut ChaCha8Rng) -> f64 {
    let (n, c, h, w, o) = random_shape(rng);
    let x = random_tensor(rng, &[n, c, h, w]);
    let wt = random_tensor(rng, &[o, c, 3, 3]);
    let b = random_tensor(rng, &[o]);
    let dy = random_tensor(rng, &[n, o, h, w]);
    let (dx, dw, db) = ops::conv2d_backward(&x, &wt, &dy).expect("conv backward");
    let obj_x = |v: &[f64]| {
        let x = Tensor::new(x.shape().to_vec(), v.to_vec()).unwrap();
        dot(direct_conv2d(&x, &wt, &b).data(), dy.data())
    };
    let obj_w = |v: &[f64]| {
        let wt = Tensor::new(wt.shape().to_vec(), v.to_vec()).unwrap();
        dot(direct_conv2d(&x, &wt, &b).data(), dy.data())
    };
    let obj_b = |v: &[f64]| {
        let b = Tensor::new(b.shape().to_vec(), v.to_vec()).unwrap();
        dot(direct_conv2d(&x, &wt, &b).data(), dy.data())
    };
    max_rel(dx.data(), &central_difference(obj_x, x.data(), FD_EPS))
        .max(max_rel(dw.data(), &central_difference(obj_w, wt.data(), FD_EPS)))
        .max(max_rel(db.data(), &central_difference(obj_b, b.data(), FD_EPS)))
}

pub fn check_relu(rng: &mut ChaCha8Rng) -> f64 {
    let (n, c, h, w, _) = random_shape(rng);
    let x = separated_tensor(rng, &[n, c, h, w]);
    let dy = random_tensor(rng, x.shape());
    let dx = ops::relu_backward(&x, &dy).expect("relu backward");
    let obj = |v: &[f64]| v.iter().zip(dy.data()).map(|(&a, &g)| a.max(0.0) * g).sum();
    max_rel(dx.data(), &central_difference(obj, x.data(), FD_EPS))
}

pub fn check_maxpool(rng: &mut ChaCha8Rng) -> f64 {
    let (n, c, h, w, _) = random_shape(rng);
    let x = separated_tensor(rng, &[n, c, h, w]);
    let (y, idx) = ops::maxpool2(&x).expect("maxpool");
    let dy = random_tensor(rng, y.shape());
    let dx = ops::maxpool2_backward(&idx, &dy, x.shape()).expect("maxpool backward");
    let obj = |v: &[f64]| {
        let x = Tensor::new(x.shape().to_vec(), v.to_vec()).unwrap();
        dot(window_scan_maxpool(&x).data(), dy.data())
    };
    max_rel(dx.data(), &central_difference(obj, x.data(), FD_EPS))
}

pub fn check_fc(rng: &mut ChaCha8Rng) -> f64 {
    let n = rng.gen_range(1..=3);
    let f = rng.gen_range(1..=8);
    let o = rng.gen_range(1..=5);
    let x = random_tensor(rng, &[n, f]);
    let w = random_tensor(rng, &[o, f]);
    let b = random_tensor(rng, &[o]);
    let dy = random_tensor(rng, &[n, o]);
    let (dx, dw, db) = ops::fc_backward(&x, &w, &dy).expect("fc backward");
    let direct = |x: &[f64], w: &[f64], b: &[f64]| -> f64 {
        let mut total = 0.0;
        for s in 0..n {
            for k in 0..o {
                let mut acc = b[k];
                for j in 0..f {
                    acc += x[s * f + j] * w[k * f + j];
                }
                total += acc * dy.data()[s * o + k];
            }
        }
        total
    };
    max_rel(dx.data(), &central_difference(|v| direct(v, w.data(), b.data()), x.data(), FD_EPS))
        .max(max_rel(dw.data(), &central_difference(|v| direct(x.data(), v, b.data()), w.data(), FD_EPS)))
        .max(max_rel(db.data(), &central_difference(|v| direct(x.data(), w.data(), v), b.data(), FD_EPS)))
}

pub fn check_softmax_xent(rng: &mut ChaCha8Rng) -> f64 {
    let n = rng.gen_range(1..=4);
    let logits = Tensor::from_fn(&[n, 10], |_| rng.gen_range(-3.0..3.0));
    let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..10)).collect();
    let (_, grad) = ops::softmax_xent(&logits, &labels).expect("softmax_xent");
    let obj = |v: &[f64]| {
        let mut total = 0.0;
        for (row, &l) in v.chunks(10).zip(&labels) {
            let lse = row.iter().map(|z| z.exp()).sum::<f64>().ln();
            total += lse - row[usize::from(l)];
        }
        total / n as f64
    };
    max_rel(grad.data(), &central_difference(obj, logits.data(), FD_EPS))
}

/// Runs every backward kernel against finite differences on `instances`
/// random problems each.
pub fn gradient_suite(instances: usize, seed: u64) -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    type Check = fn(&mut ChaCha8Rng) -> f64;
    let kernels: [(&'static str, Check); 5] = [
        ("conv2d", check_conv),
        ("relu", check_relu),
        ("maxpool2", check_maxpool),
        ("fc", check_fc),
        ("softmax_xent", check_softmax_xent),
    ];
    let mut out = Vec::new();
    for (kernel, check) in kernels {
        for instance in 0..instances {
            out.push(GradCheck {
                kernel,
                instance,
                max_rel_err: check(&mut rng),
            });
        }
    }
    out
}

/// Adds noise to every unit not in `keep` (all tensors, all bias slots).
pub fn perturb_outside(params: &mut FluidParams, keep: &BTreeSet<ParamUnit>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for unit in ParamUnit::all() {
        if keep.contains(&unit) {
            continue;
        }
        params.weights.map_unit(unit, |v| v + rng.gen_range(-0.5f32..0.5));
    }
}

/// A random batch of `n` images with pixels in [0, 1].
pub fn random_images(n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[n, 1, 28, 28], |_| rng.gen_range(0.0f32..=1.0))
}

/// f64 copy of a sub-network's tensors at full store shape.
#[derive(Debug, Clone)]
pub struct RefWeights {
    pub conv_w: [Tensor<f64>; 3],
    pub conv_b: [Tensor<f64>; 3],
    pub fc_w: Tensor<f64>,
    pub fc_b: Tensor<f64>,
}

impl RefWeights {
    pub fn of(weights: &ParamSet, bias_slot: usize) -> Self {
        Self {
            conv_w: std::array::from_fn(|l| weights.conv_w[l].cast()),
            conv_b: std::array::from_fn(|l| weights.conv_b[l].cast()),
            fc_w: weights.fc_w.cast(),
            fc_b: weights.fc_b[bias_slot].cast(),
        }
    }

    /// `self + t * dir`, elementwise over every tensor.
    pub fn shifted(&self, dir: &RefWeights, t: f64) -> Self {
        let add = |a: &Tensor<f64>, b: &Tensor<f64>| {
            Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(x, y)| x + t * y).collect())
                .expect("same shape")
        };
        Self {
            conv_w: std::array::from_fn(|l| add(&self.conv_w[l], &dir.conv_w[l])),
            conv_b: std::array::from_fn(|l| add(&self.conv_b[l], &dir.conv_b[l])),
            fc_w: add(&self.fc_w, &dir.fc_w),
            fc_b: add(&self.fc_b, &dir.fc_b),
        }
    }
}

/// Logits of the network using conv channels `channels`, built from direct
/// summation and explicit index gathering.
pub fn reference_logits(w: &RefWeights, channels: std::ops::Range<usize>, x: &Tensor<f64>) -> Tensor<f64> {
    let mut h = x.clone();
    for l in 0..3 {
        let full_in = w.conv_w[l].dim(1);
        let inputs: Vec<usize> = if l == 0 { (0..full_in).collect() } else { channels.clone().collect() };
        let rows: Vec<usize> = channels.clone().collect();
        let ws = Tensor::from_fn(&[rows.len(), inputs.len(), 3, 3], |i| {
            let (o, rest) = (i / (inputs.len() * 9), i % (inputs.len() * 9));
            w.conv_w[l].data()[(rows[o] * full_in + inputs[rest / 9]) * 9 + rest % 9]
        });
        let bs = Tensor::from_fn(&[rows.len()], |o| w.conv_b[l].data()[rows[o]]);
        let z = direct_conv2d(&h, &ws, &bs);
        h = window_scan_maxpool(&z.map(|v| v.max(0.0)));
    }
    let n = h.dim(0);
    let per = h.len() / n;
    let full = w.fc_w.dim(1);
    let classes = w.fc_w.dim(0);
    let first = channels.start * per / channels.len();
    Tensor::from_fn(&[n, classes], |i| {
        let (s, k) = (i / classes, i % classes);
        let mut acc = w.fc_b.data()[k];
        for j in 0..per {
            acc += w.fc_w.data()[k * full + first + j] * h.data()[s * per + j];
        }
        acc
    })
}

pub fn reference_xent(logits: &Tensor<f64>, labels: &[u8]) -> f64 {
    let c = logits.dim(1);
    let mut total = 0.0;
    for (row, &l) in logits.data().chunks(c).zip(labels) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        total += lse - row[usize::from(l)];
    }
    total / labels.len() as f64
}
