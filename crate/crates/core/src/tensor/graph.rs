use rand::Rng;

use super::kernels::{self, ConvGeom};
use super::{conv_out_dim, matmul_dims, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op {
    /// Inputs, parameters, and any node whose inputs need no gradient.
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        batch: usize,
        filters: usize,
        // patch matrix, kept only when the kernel needs a gradient
        cols: Vec<f32>,
    },
    Relu {
        x: Var,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    Dropout {
        x: Var,
        scale: Vec<f32>,
    },
    Reshape {
        x: Var,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum {
        x: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only tape. Nodes only reference earlier nodes, so the recording order
/// is already a topological order and the tape cannot contain a cycle.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by one [`Graph::backward`] call, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives a gradient.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul { a, b }, rg))
    }

    /// `x[N×F] + bias[F]`, broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xs, bs) = (self.value(x).shape(), self.value(bias).shape());
        if xs.len() != 2 || bs != [xs[1]] {
            return Err(Error::Dimension(format!(
                "bias {bs:?} does not broadcast over {xs:?}"
            )));
        }
        let f = xs[1];
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_exact_mut(f) {
            for (o, bv) in row.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(out, Op::AddBias { x, bias }, rg))
    }

    /// Cross-correlation of `input[N×C×H×W]` with `kernel[F×C×kh×kw]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let is = self.value(input).shape().to_vec();
        let ks = self.value(kernel).shape().to_vec();
        if is.len() != 4 || ks.len() != 4 || is[1] != ks[1] {
            return Err(Error::Dimension(format!(
                "conv2d needs input [N, C, H, W] and kernel [F, C, kh, kw], got {is:?} and {ks:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::Parameter("conv2d stride must be >= 1".into()));
        }
        let (n, c, h, w) = (is[0], is[1], is[2], is[3]);
        let (f, kh, kw) = (ks[0], ks[2], ks[3]);
        let (oh, ow) = match (
            conv_out_dim(h, kh, stride, padding),
            conv_out_dim(w, kw, stride, padding),
        ) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(Error::Dimension(format!(
                    "kernel {ks:?} larger than input {is:?} padded by {padding}"
                )))
            }
        };
        if let Some(b) = bias {
            if self.value(b).shape() != [f] {
                return Err(Error::Dimension(format!(
                    "conv bias {:?} must be [{f}]",
                    self.value(b).shape()
                )));
            }
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: w,
            kh,
            kw,
            stride,
            padding,
        };
        let plane = oh * ow;
        let np = n * plane;
        let ckk = geom.patch_len();
        let x = self.value(input).data();
        let mut cols = vec![0.0f32; ckk * np];
        for s in 0..n {
            kernels::im2col(&x[s * c * h * w..(s + 1) * c * h * w], &geom, &mut cols, np, s * plane);
        }
        let mut wide = vec![0.0f32; f * np];
        kernels::matmul_nn(self.value(kernel).data(), &cols, f, ckk, np, &mut wide, false);

        let bias_vals = bias.map(|b| self.value(b).data().to_vec());
        let mut out = vec![0.0f32; np * f];
        for s in 0..n {
            for fi in 0..f {
                let src = &wide[fi * np + s * plane..fi * np + (s + 1) * plane];
                let dst = &mut out[(s * f + fi) * plane..(s * f + fi + 1) * plane];
                match &bias_vals {
                    Some(b) => dst.iter_mut().zip(src).for_each(|(d, v)| *d = v + b[fi]),
                    None => dst.copy_from_slice(src),
                }
            }
        }
        let value = Tensor::new(vec![n, f, oh, ow], out)?;
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        if !self.requires_grad(kernel) {
            cols = Vec::new();
        }
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                batch: n,
                filters: f,
                cols,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Relu { x }, rg)
    }

    /// Max pooling over `size×size` windows of an `N×C×H×W` tensor. Ties go to the
    /// first maximal element in row-major window order.
    pub fn max_pool2d(&mut self, x: Var, size: usize, stride: usize) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 {
            return Err(Error::Dimension(format!("max_pool2d needs rank 4, got {s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = match (conv_out_dim(h, size, stride, 0), conv_out_dim(w, size, stride, 0)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::Dimension(format!(
                    "pool window {size} stride {stride} does not fit {s:?}"
                )))
            }
        };
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for nc in 0..n * c {
            let base = nc * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * w + ox * stride;
                    for ky in 0..size {
                        for kx in 0..size {
                            let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                            if data[idx] > data[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::MaxPool { x, argmax }, rg))
    }

    /// Inverted dropout: in training mode each element is zeroed with probability
    /// `rate` and survivors are scaled by `1/(1-rate)`; evaluation mode is the identity.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f32,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let scale: Vec<f32> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f32>() < rate { 0.0 } else { keep })
            .collect();
        let mut out = self.value(x).clone();
        out.data_mut()
            .iter_mut()
            .zip(&scale)
            .for_each(|(v, s)| *v *= s);
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Dropout { x, scale }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Reshape { x }, rg))
    }

    /// Collapse everything after the batch axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape();
        if s.is_empty() {
            return Err(Error::Dimension("cannot flatten a scalar".into()));
        }
        let shape = [s[0], s[1..].iter().product()];
        self.reshape(x, &shape)
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.value(logits).shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::Dimension(format!(
                "logits {s:?} do not match {} labels",
                labels.len()
            )));
        }
        let (n, c) = (s[0], s[1]);
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
            return Err(Error::Index(format!(
                "label {l} at position {i} out of range for {c} classes"
            )));
        }
        let data = self.value(logits).data();
        let mut probs = vec![0f64; n * c];
        let mut total = 0f64;
        for (i, &label) in labels.iter().enumerate() {
            let row = &data[i * c..(i + 1) * c];
            let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
            let mut z = 0f64;
            for (p, &v) in probs[i * c..(i + 1) * c].iter_mut().zip(row) {
                *p = (v as f64 - max).exp();
                z += *p;
            }
            probs[i * c..(i + 1) * c].iter_mut().for_each(|p| *p /= z);
            total += z.ln() - (row[label] as f64 - max);
        }
        let loss = Tensor::scalar((total / n as f64) as f32);
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            loss,
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(total as f32), Op::Sum { x }, rg)
    }

    /// Elementwise product of two equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Dimension(format!(
                "mul needs equal shapes, got {:?} and {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul { a, b }, rg))
    }

    /// Reverse sweep from a scalar `loss`. Every node is visited once, in reverse
    /// recording order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.filter(|_| self.nodes[i].requires_grad)
                    .map(|g| Tensor::new(self.nodes[i].value.shape().to_vec(), g))
                    .transpose()
            })
            .collect::<Result<_>>()?;
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k, n) = matmul_dims(self.value(*a).shape(), self.value(*b).shape())
                    .expect("shapes validated on record");
                if self.wants(*a) {
                    let da = slot(grads, *a, m * k);
                    kernels::matmul_nt(g, self.value(*b).data(), m, n, k, da, true);
                }
                if self.wants(*b) {
                    let db = slot(grads, *b, k * n);
                    kernels::matmul_tn(self.value(*a).data(), g, m, k, n, db, true);
                }
            }
            Op::AddBias { x, bias } => {
                if self.wants(*x) {
                    add_into(slot(grads, *x, g.len()), g);
                }
                if self.wants(*bias) {
                    let f = self.value(*bias).len();
                    let mut acc = vec![0f64; f];
                    for row in g.chunks_exact(f) {
                        acc.iter_mut().zip(row).for_each(|(a, &v)| *a += v as f64);
                    }
                    add_f64_into(slot(grads, *bias, f), &acc);
                }
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                batch,
                filters,
                cols,
            } => {
                let (n, f) = (*batch, *filters);
                let plane = geom.out_h() * geom.out_w();
                let np = n * plane;
                let ckk = geom.patch_len();
                // regroup [N, F, P] into a wide [F, N·P] matrix
                let mut wide = vec![0.0f32; f * np];
                for s in 0..n {
                    for fi in 0..f {
                        wide[fi * np + s * plane..fi * np + (s + 1) * plane]
                            .copy_from_slice(&g[(s * f + fi) * plane..(s * f + fi + 1) * plane]);
                    }
                }
                if self.wants(*kernel) {
                    let dk = slot(grads, *kernel, f * ckk);
                    kernels::matmul_nt(&wide, cols, f, np, ckk, dk, true);
                }
                if let Some(b) = bias.filter(|b| self.wants(*b)) {
                    let acc: Vec<f64> = wide
                        .chunks_exact(np)
                        .map(|row| row.iter().map(|&v| v as f64).sum())
                        .collect();
                    add_f64_into(slot(grads, b, f), &acc);
                }
                if self.wants(*input) {
                    let mut dcols = vec![0.0f32; ckk * np];
                    kernels::matmul_tn(self.value(*kernel).data(), &wide, f, ckk, np, &mut dcols, false);
                    let img = geom.channels * geom.height * geom.width;
                    let dx = slot(grads, *input, n * img);
                    for s in 0..n {
                        kernels::col2im(&dcols, geom, &mut dx[s * img..(s + 1) * img], np, s * plane);
                    }
                }
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                let dx = slot(grads, *x, g.len());
                for ((d, &gv), &v) in dx.iter_mut().zip(g).zip(xv) {
                    if v > 0.0 {
                        *d += gv;
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                let len = self.value(*x).len();
                let dx = slot(grads, *x, len);
                for (&idx, &gv) in argmax.iter().zip(g) {
                    dx[idx as usize] += gv;
                }
            }
            Op::Dropout { x, scale } => {
                let dx = slot(grads, *x, g.len());
                for ((d, &gv), &s) in dx.iter_mut().zip(g).zip(scale) {
                    *d += gv * s;
                }
            }
            Op::Reshape { x } => add_into(slot(grads, *x, g.len()), g),
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let c = probs.len() / n;
                let upstream = g[0] as f64 / n as f64;
                let dx = slot(grads, *logits, n * c);
                for (i, &label) in labels.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == label { 1.0 } else { 0.0 };
                        let v = (probs[i * c + j] - onehot) * upstream;
                        dx[i * c + j] = (dx[i * c + j] as f64 + v) as f32;
                    }
                }
            }
            Op::Sum { x } => {
                let dx = slot(grads, *x, self.value(*x).len());
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mul { a, b } => {
                if self.wants(*a) {
                    let bv = self.value(*b).data();
                    let da = slot(grads, *a, g.len());
                    da.iter_mut()
                        .zip(g)
                        .zip(bv)
                        .for_each(|((d, &gv), &v)| *d += gv * v);
                }
                if self.wants(*b) {
                    let av = self.value(*a).data();
                    let db = slot(grads, *b, g.len());
                    db.iter_mut()
                        .zip(g)
                        .zip(av)
                        .for_each(|((d, &gv), &v)| *d += gv * v);
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f32>>], v: Var, len: usize) -> &mut [f32] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn add_f64_into(dst: &mut [f32], src: &[f64]) {
    dst.iter_mut()
        .zip(src)
        .for_each(|(d, &s)| *d = (*d as f64 + s) as f32);
}
