//! Finite-difference gradient checks against an independent 64-bit reference.
//!
//! Each case builds a tape from f32 values, takes its analytic gradient, and
//! compares it with central differences (step 1e-3) of a plain f64
//! re-implementation of the same computation. Coordinates whose perturbation
//! flips a ReLU sign or a pooling arg-max are skipped, since the function is
//! not differentiable across them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ticketlab::tensor::{Graph, Mode, Tensor, Var};

pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct LayerResult {
    pub layer: &'static str,
    pub instances: usize,
    pub passed: usize,
    pub worst: f64,
}

/// f64 tensor with shape.
#[derive(Clone, Debug)]
pub struct T64 {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl T64 {
    fn from(t: &Tensor) -> T64 {
        T64 {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| v as f64).collect(),
        }
    }
}

/// Activation pattern of every kink the reference passed through.
type Pattern = Vec<u32>;

fn conv64(x: &T64, k: &T64, b: Option<&T64>, stride: usize, pad: usize, pat: &mut Pattern) -> T64 {
    let _ = pat;
    let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (f, kh, kw) = (k.shape[0], k.shape[2], k.shape[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * f * oh * ow];
    for ni in 0..n {
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data[fi]);
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x.data[((ni * c + ci) * h + iy as usize) * w + ix as usize];
                                let kv = k.data[((fi * c + ci) * kh + ky) * kw + kx];
                                acc += xv * kv;
                            }
                        }
                    }
                    out[((ni * f + fi) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    T64 { shape: vec![n, f, oh, ow], data: out }
}

fn matmul64(a: &T64, b: &T64) -> T64 {
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|p| a.data[i * k + p] * b.data[p * n + j]).sum();
        }
    }
    T64 { shape: vec![m, n], data: out }
}

fn bias64(x: &T64, b: &T64) -> T64 {
    let f = x.shape[1];
    let data = x.data.iter().enumerate().map(|(i, v)| v + b.data[i % f]).collect();
    T64 { shape: x.shape.clone(), data }
}

fn relu64(x: &T64, pat: &mut Pattern) -> T64 {
    pat.extend(x.data.iter().map(|&v| (v > 0.0) as u32));
    T64 {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

fn pool64(x: &T64, size: usize, stride: usize, pat: &mut Pattern) -> T64 {
    let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let oh = (h - size) / stride + 1;
    let ow = (w - size) / stride + 1;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for nc in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = (f64::NEG_INFINITY, 0u32);
                for ky in 0..size {
                    for kx in 0..size {
                        let v = x.data[nc * h * w + (oy * stride + ky) * w + ox * stride + kx];
                        if v > best.0 {
                            best = (v, (ky * size + kx) as u32);
                        }
                    }
                }
                pat.push(best.1);
                out.push(best.0);
            }
        }
    }
    T64 { shape: vec![n, c, oh, ow], data: out }
}

fn scale64(x: &T64, s: &[f64]) -> T64 {
    T64 {
        shape: x.shape.clone(),
        data: x.data.iter().zip(s).map(|(a, b)| a * b).collect(),
    }
}

fn ce64(logits: &T64, labels: &[usize]) -> f64 {
    let c = logits.shape[1];
    let mut total = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        let row = &logits.data[i * c..(i + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        total += z.ln() + max - row[l];
    }
    total / labels.len() as f64
}

fn dot64(x: &T64, r: &[f64]) -> f64 {
    x.data.iter().zip(r).map(|(a, b)| a * b).sum()
}

/// Norm-wise relative error of analytic vs numerical gradients over the
/// coordinates that stay on one side of every kink.
fn compare(
    inputs: &[T64],
    analytic: &[Vec<f32>],
    f: &dyn Fn(&[T64], &mut Pattern) -> f64,
) -> f64 {
    let mut base_pat = Vec::new();
    f(inputs, &mut base_pat);
    let (mut diff, mut na, mut nn) = (0f64, 0f64, 0f64);
    let mut work = inputs.to_vec();
    for (t, grads) in analytic.iter().enumerate() {
        for i in 0..work[t].data.len() {
            let orig = work[t].data[i];
            let (mut pp, mut pm) = (Vec::new(), Vec::new());
            work[t].data[i] = orig + STEP;
            let lp = f(&work, &mut pp);
            work[t].data[i] = orig - STEP;
            let lm = f(&work, &mut pm);
            work[t].data[i] = orig;
            if pp != base_pat || pm != base_pat {
                continue;
            }
            let num = (lp - lm) / (2.0 * STEP);
            let a = grads[i] as f64;
            diff += (a - num).powi(2);
            na += a * a;
            nn += num * num;
        }
    }
    let denom = na.sqrt().max(nn.sqrt());
    if denom < 1e-12 {
        diff.sqrt()
    } else {
        diff.sqrt() / denom
    }
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero.
fn rand_away(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05f32..1.0);
            if rng.gen_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Distinct values spaced well apart, shuffled.
fn rand_distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data: Vec<f32> = (0..n).map(|i| (i as f32 - n as f32 / 2.0) * 0.05).collect();
    for i in (1..n).rev() {
        data.swap(i, rng.gen_range(0..=i));
    }
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn grads_of(g: &Graph, loss: Var, vars: &[Var]) -> Vec<Vec<f32>> {
    let gr = g.backward(loss).unwrap();
    vars.iter().map(|&v| gr.get(v).unwrap().data().to_vec()).collect()
}

/// Append `sum(y * r)` for a random constant `r`.
fn scalarize(g: &mut Graph, y: Var, rng: &mut ChaCha8Rng) -> (Var, Vec<f64>) {
    let shape = g.value(y).shape().to_vec();
    let r = rand_t(rng, &shape, -1.0, 1.0);
    let r64 = r.data().iter().map(|&v| v as f64).collect();
    let rv = g.constant(r);
    let p = g.mul(y, rv).unwrap();
    (g.sum(p), r64)
}

/// Keep-scale vector that `dropout` will draw from an rng seeded with `seed`.
fn dropout_scale(len: usize, rate: f32, seed: u64) -> Vec<f64> {
    let mut g = Graph::new();
    let ones = g.leaf(Tensor::ones(&[len]));
    let y = g.dropout(ones, rate, Mode::Train, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    g.value(y).data().iter().map(|&v| v as f64).collect()
}

fn case(kind: &str, rng: &mut ChaCha8Rng) -> f64 {
    let mut g = Graph::new();
    match kind {
        "conv2d" => {
            let (n, c, f) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4));
            let k = rng.gen_range(1..4);
            let stride = rng.gen_range(1..3);
            let pad = rng.gen_range(0..2);
            let h = rng.gen_range(k.max(3)..7);
            let w = rng.gen_range(k.max(3)..7);
            let x = g.leaf(rand_t(rng, &[n, c, h, w], -1.0, 1.0));
            let kt = g.leaf(rand_t(rng, &[f, c, k, k], -1.0, 1.0));
            let b = g.leaf(rand_t(rng, &[f], -1.0, 1.0));
            let y = g.conv2d(x, kt, Some(b), stride, pad).unwrap();
            let (loss, r) = scalarize(&mut g, y, rng);
            let vars = [x, kt, b];
            let ins: Vec<T64> = vars.iter().map(|&v| T64::from(g.value(v))).collect();
            compare(&ins, &grads_of(&g, loss, &vars), &|t, p| dot64(&conv64(&t[0], &t[1], Some(&t[2]), stride, pad, p), &r))
        }
        "linear" => {
            let (m, k, n) = (rng.gen_range(1..6), rng.gen_range(1..8), rng.gen_range(1..6));
            let a = g.leaf(rand_t(rng, &[m, k], -1.0, 1.0));
            let b = g.leaf(rand_t(rng, &[k, n], -1.0, 1.0));
            let y = g.matmul(a, b).unwrap();
            let (loss, r) = scalarize(&mut g, y, rng);
            let vars = [a, b];
            let ins: Vec<T64> = vars.iter().map(|&v| T64::from(g.value(v))).collect();
            compare(&ins, &grads_of(&g, loss, &vars), &|t, _| dot64(&matmul64(&t[0], &t[1]), &r))
        }
        "bias" => {
            let (m, f) = (rng.gen_range(1..6), rng.gen_range(1..8));
            let x = g.leaf(rand_t(rng, &[m, f], -1.0, 1.0));
            let b = g.leaf(rand_t(rng, &[f], -1.0, 1.0));
            let y = g.add_bias(x, b).unwrap();
            let (loss, r) = scalarize(&mut g, y, rng);
            let vars = [x, b];
            let ins: Vec<T64> = vars.iter().map(|&v| T64::from(g.value(v))).collect();
            compare(&ins, &grads_of(&g, loss, &vars), &|t, _| dot64(&bias64(&t[0], &t[1]), &r))
        }
        "relu" => {
            let shape = [rng.gen_range(1..4), rng.gen_range(1..10)];
            let x = g.leaf(rand_away(rng, &shape));
            let y = g.relu(x);
            let (loss, r) = scalarize(&mut g, y, rng);
            let ins = vec![T64::from(g.value(x))];
            compare(&ins, &grads_of(&g, loss, &[x]), &|t, p| dot64(&relu64(&t[0], p), &r))
        }
        "max_pool" => {
            let size = rng.gen_range(1..4);
            let stride = rng.gen_range(1..3);
            let shape = [rng.gen_range(1..3), rng.gen_range(1..3), rng.gen_range(size..7), rng.gen_range(size..7)];
            let x = g.leaf(rand_distinct(rng, &shape));
            let y = g.max_pool2d(x, size, stride).unwrap();
            let (loss, r) = scalarize(&mut g, y, rng);
            let ins = vec![T64::from(g.value(x))];
            compare(&ins, &grads_of(&g, loss, &[x]), &|t, p| dot64(&pool64(&t[0], size, stride, p), &r))
        }
        "dropout" => {
            let shape = [rng.gen_range(1..4), rng.gen_range(1..12)];
            let rate = rng.gen_range(0.0f32..0.9);
            let seed = rng.gen();
            let scale = dropout_scale(shape[0] * shape[1], rate, seed);
            let x = g.leaf(rand_t(rng, &shape, -1.0, 1.0));
            let y = g.dropout(x, rate, Mode::Train, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let (loss, r) = scalarize(&mut g, y, rng);
            let ins = vec![T64::from(g.value(x))];
            compare(&ins, &grads_of(&g, loss, &[x]), &|t, _| dot64(&scale64(&t[0], &scale), &r))
        }
        "flatten" => {
            let shape = [rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4)];
            let x = g.leaf(rand_t(rng, &shape, -1.0, 1.0));
            let y = g.flatten(x).unwrap();
            let (loss, r) = scalarize(&mut g, y, rng);
            let ins = vec![T64::from(g.value(x))];
            compare(&ins, &grads_of(&g, loss, &[x]), &|t, _| dot64(&t[0], &r))
        }
        "softmax_ce" => {
            let (n, c) = (rng.gen_range(1..6), rng.gen_range(2..9));
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
            let x = g.leaf(rand_t(rng, &[n, c], -4.0, 4.0));
            let loss = g.softmax_cross_entropy(x, &labels).unwrap();
            let ins = vec![T64::from(g.value(x))];
            compare(&ins, &grads_of(&g, loss, &[x]), &|t, _| ce64(&t[0], &labels))
        }
        "cnn" => {
            let (n, classes, hidden) = (2, 3, 6);
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
            let rate = 0.4;
            let seed = rng.gen();
            let scale = dropout_scale(n * hidden, rate, seed);
            let x = g.leaf(rand_t(rng, &[n, 2, 6, 6], -1.0, 1.0));
            let k = g.leaf(rand_t(rng, &[3, 2, 3, 3], -0.5, 0.5));
            let kb = g.leaf(rand_t(rng, &[3], -0.1, 0.1));
            let w1 = g.leaf(rand_t(rng, &[27, hidden], -0.4, 0.4));
            let b1 = g.leaf(rand_t(rng, &[hidden], -0.1, 0.1));
            let w2 = g.leaf(rand_t(rng, &[hidden, classes], -0.4, 0.4));
            let b2 = g.leaf(rand_t(rng, &[classes], -0.1, 0.1));
            let y = g.conv2d(x, k, Some(kb), 1, 1).unwrap();
            let y = g.relu(y);
            let y = g.max_pool2d(y, 2, 2).unwrap();
            let y = g.flatten(y).unwrap();
            let y = g.matmul(y, w1).unwrap();
            let y = g.add_bias(y, b1).unwrap();
            let y = g.relu(y);
            let y = g.dropout(y, rate, Mode::Train, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let y = g.matmul(y, w2).unwrap();
            let y = g.add_bias(y, b2).unwrap();
            let loss = g.softmax_cross_entropy(y, &labels).unwrap();
            let vars = [x, k, kb, w1, b1, w2, b2];
            let ins: Vec<T64> = vars.iter().map(|&v| T64::from(g.value(v))).collect();
            compare(&ins, &grads_of(&g, loss, &vars), &|t, p| {
                let y = conv64(&t[0], &t[1], Some(&t[2]), 1, 1, p);
                let y = relu64(&y, p);
                let y = pool64(&y, 2, 2, p);
                let y = T64 { shape: vec![n, 27], data: y.data };
                let y = bias64(&matmul64(&y, &t[3]), &t[4]);
                let y = scale64(&relu64(&y, p), &scale);
                ce64(&bias64(&matmul64(&y, &t[5]), &t[6]), &labels)
            })
        }
        other => panic!("unknown layer {other}"),
    }
}

pub const LAYERS: [&str; 9] = [
    "conv2d", "linear", "bias", "relu", "max_pool", "dropout", "flatten", "softmax_ce", "cnn",
];

pub fn run_suite(instances: usize, seed: u64) -> Vec<LayerResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LAYERS
        .iter()
        .map(|&layer| {
            let mut res = LayerResult { layer, instances, passed: 0, worst: 0.0 };
            for _ in 0..instances {
                let err = case(layer, &mut rng);
                res.worst = res.worst.max(err);
                res.passed += (err < TOLERANCE) as usize;
            }
            res
        })
        .collect()
}
