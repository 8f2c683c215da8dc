//! Convolutional classifier: a plain conv backbone split into blocks, followed by
//! a two-layer fully connected head with dropout.

use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{TableData, TensorTable};
use crate::error::{Error, Result};
use crate::tensor::{conv_out_dim, Gradients, Graph, Mode, Tensor, Var};

/// Architecture description for [`Network::build`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub input_channels: usize,
    pub input_size: usize,
    /// Output channels of each backbone block, one conv per block.
    pub conv_channels: Vec<usize>,
    pub kernel_size: usize,
    pub pool_size: usize,
    pub hidden: usize,
    pub dropout: f32,
    pub classes: usize,
    pub bias: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            input_channels: 3,
            input_size: 32,
            conv_channels: vec![8, 16, 32],
            kernel_size: 3,
            pool_size: 2,
            hidden: 256,
            dropout: 0.4,
            classes: 8,
            bias: true,
        }
    }
}

impl ArchConfig {
    /// Expand into the flat layer list: `[conv, relu, pool]` per backbone block,
    /// then `flatten, linear(hidden), relu, dropout, linear(classes)`.
    pub fn layers(&self) -> Vec<(Block, LayerSpec)> {
        let mut out = Vec::new();
        let mut channels = self.input_channels;
        let mut size = self.input_size;
        for (i, &c) in self.conv_channels.iter().enumerate() {
            let block = Block::Backbone(i + 1);
            out.push((
                block,
                LayerSpec::Conv {
                    in_channels: channels,
                    out_channels: c,
                    kernel: self.kernel_size,
                    stride: 1,
                    padding: self.kernel_size / 2,
                },
            ));
            out.push((block, LayerSpec::Relu));
            out.push((
                block,
                LayerSpec::Pool {
                    size: self.pool_size,
                    stride: self.pool_size,
                },
            ));
            channels = c;
            size = conv_out_dim(size, self.pool_size, self.pool_size, 0).unwrap_or(0);
        }
        let flat = channels * size * size;
        out.push((Block::Head, LayerSpec::Flatten));
        out.push((
            Block::Head,
            LayerSpec::Linear {
                in_features: flat,
                out_features: self.hidden,
            },
        ));
        out.push((Block::Head, LayerSpec::Relu));
        out.push((Block::Head, LayerSpec::Dropout { rate: self.dropout }));
        out.push((
            Block::Head,
            LayerSpec::Linear {
                in_features: self.hidden,
                out_features: self.classes,
            },
        ));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Relu,
    Dropout {
        rate: f32,
    },
    Flatten,
    Pool {
        size: usize,
        stride: usize,
    },
}

impl LayerSpec {
    fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::Relu => "relu",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Pool { .. } => "pool",
        }
    }
}

/// Which part of the network a layer or parameter belongs to. Backbone blocks
/// are numbered from 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Block {
    Backbone(usize),
    Head,
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Block::Backbone(i) => write!(f, "backbone.{i}"),
            Block::Head => f.write_str("head"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FreezePolicy {
    /// Only the last backbone block and the head train.
    L0,
    /// Everything trains.
    Full,
}

/// A named trainable tensor with its gradient, binary prune mask and the
/// snapshot of its initial value.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub block: Block,
    pub value: Tensor,
    pub grad: Tensor,
    /// Entries are exactly 0.0 or 1.0.
    pub mask: Tensor,
    pub trainable: bool,
    pub prunable: bool,
    init_snapshot: Option<Tensor>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, block: Block, value: Tensor, prunable: bool) -> Self {
        let shape = value.shape().to_vec();
        Parameter {
            name: name.into(),
            block,
            grad: Tensor::zeros(&shape),
            mask: Tensor::ones(&shape),
            value,
            trainable: true,
            prunable,
            init_snapshot: None,
        }
    }

    pub fn init_snapshot(&self) -> Option<&Tensor> {
        self.init_snapshot.as_ref()
    }

    pub fn masked_count(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m == 0.0).count()
    }

    /// True when every masked position holds exactly `+0.0` or `-0.0`.
    pub fn masked_positions_zero(&self) -> bool {
        self.mask
            .data()
            .iter()
            .zip(self.value.data())
            .all(|(&m, &v)| m != 0.0 || v == 0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    spec: LayerSpec,
    block: Block,
    weight: Option<usize>,
    bias: Option<usize>,
}

/// Result of a forward pass: the tape, the logits node, and which tape leaf
/// carries which registry parameter.
#[derive(Debug)]
pub struct Forward {
    pub graph: Graph,
    pub logits: Var,
    bindings: Vec<(usize, Var)>,
}

impl Forward {
    pub fn param_var(&self, index: usize) -> Option<Var> {
        self.bindings.iter().find(|(i, _)| *i == index).map(|(_, v)| *v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    params: Vec<Parameter>,
    input_shape: [usize; 3],
    classes: usize,
    backbone_blocks: usize,
}

#[derive(Debug, Clone, Copy)]
enum Activation {
    Spatial(usize, usize, usize),
    Flat(usize),
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Spatial(c, h, w) => write!(f, "[{c}, {h}, {w}]"),
            Activation::Flat(n) => write!(f, "[{n}]"),
        }
    }
}

impl Network {
    /// Build the network described by `config` with fan-in-scaled uniform
    /// weights in `±sqrt(1/fan_in)` and zero biases.
    pub fn build<R: Rng + ?Sized>(config: &ArchConfig, rng: &mut R) -> Result<Network> {
        if config.classes < 2 {
            return Err(Error::Build(format!(
                "class count {} must be at least 2",
                config.classes
            )));
        }
        if config.conv_channels.is_empty() {
            return Err(Error::Build("backbone needs at least one block".into()));
        }
        Self::from_layers(
            [config.input_channels, config.input_size, config.input_size],
            &config.layers(),
            config.bias,
            rng,
        )
    }

    /// Build from an explicit layer list, validating that consecutive layers compose.
    pub fn from_layers<R: Rng + ?Sized>(
        input_shape: [usize; 3],
        layers: &[(Block, LayerSpec)],
        bias: bool,
        rng: &mut R,
    ) -> Result<Network> {
        let mut act = Activation::Spatial(input_shape[0], input_shape[1], input_shape[2]);
        let mut built = Vec::with_capacity(layers.len());
        let mut params = Vec::new();
        let mut fc_index = 0;
        let mut backbone_blocks = 0;
        let mut prev = "input".to_string();
        for (i, (block, spec)) in layers.iter().enumerate() {
            let here = format!("layer {i} ({})", spec.kind());
            let mismatch = |why: String| {
                Error::Build(format!("{prev} -> {here}: {why}"))
            };
            if let Block::Backbone(b) = block {
                backbone_blocks = backbone_blocks.max(*b);
            }
            let mut layer = Layer {
                spec: *spec,
                block: *block,
                weight: None,
                bias: None,
            };
            act = match (*spec, act) {
                (
                    LayerSpec::Conv {
                        in_channels,
                        out_channels,
                        kernel,
                        stride,
                        padding,
                    },
                    Activation::Spatial(c, h, w),
                ) => {
                    if in_channels != c {
                        return Err(mismatch(format!(
                            "conv expects {in_channels} input channels, got {act}"
                        )));
                    }
                    let (Some(oh), Some(ow)) = (
                        conv_out_dim(h, kernel, stride, padding),
                        conv_out_dim(w, kernel, stride, padding),
                    ) else {
                        return Err(mismatch(format!("{kernel}x{kernel} kernel does not fit {act}")));
                    };
                    let fan_in = in_channels * kernel * kernel;
                    let stem = format!("{block}.conv");
                    layer.weight = Some(params.len());
                    params.push(Parameter::new(
                        format!("{stem}.weight"),
                        *block,
                        uniform(&[out_channels, in_channels, kernel, kernel], fan_in, rng),
                        true,
                    ));
                    if bias {
                        layer.bias = Some(params.len());
                        params.push(Parameter::new(
                            format!("{stem}.bias"),
                            *block,
                            Tensor::zeros(&[out_channels]),
                            false,
                        ));
                    }
                    Activation::Spatial(out_channels, oh, ow)
                }
                (
                    LayerSpec::Linear {
                        in_features,
                        out_features,
                    },
                    Activation::Flat(n),
                ) => {
                    if in_features != n {
                        return Err(mismatch(format!(
                            "linear expects {in_features} features, got {act}"
                        )));
                    }
                    let stem = match block {
                        Block::Head => {
                            fc_index += 1;
                            format!("head.fc{fc_index}")
                        }
                        b => format!("{b}.linear{i}"),
                    };
                    layer.weight = Some(params.len());
                    params.push(Parameter::new(
                        format!("{stem}.weight"),
                        *block,
                        uniform(&[in_features, out_features], in_features, rng),
                        true,
                    ));
                    if bias {
                        layer.bias = Some(params.len());
                        params.push(Parameter::new(
                            format!("{stem}.bias"),
                            *block,
                            Tensor::zeros(&[out_features]),
                            false,
                        ));
                    }
                    Activation::Flat(out_features)
                }
                (LayerSpec::Pool { size, stride }, Activation::Spatial(c, h, w)) => {
                    match (conv_out_dim(h, size, stride, 0), conv_out_dim(w, size, stride, 0)) {
                        (Some(oh), Some(ow)) => Activation::Spatial(c, oh, ow),
                        _ => return Err(mismatch(format!("pool window {size} does not fit {act}"))),
                    }
                }
                (LayerSpec::Flatten, Activation::Spatial(c, h, w)) => Activation::Flat(c * h * w),
                (LayerSpec::Flatten, a @ Activation::Flat(_)) => a,
                (LayerSpec::Relu, a) => a,
                (LayerSpec::Dropout { rate }, a) => {
                    if !(0.0..1.0).contains(&rate) {
                        return Err(mismatch(format!("dropout rate {rate} outside [0, 1)")));
                    }
                    a
                }
                (s, a) => {
                    return Err(mismatch(format!("{} cannot consume activation {a}", s.kind())))
                }
            };
            built.push(layer);
            prev = here;
        }
        let classes = match act {
            Activation::Flat(n) => n,
            a => {
                return Err(Error::Build(format!(
                    "network must end in a flat class vector, ends in {a}"
                )))
            }
        };
        Ok(Network {
            layers: built,
            params,
            input_shape,
            classes,
            backbone_blocks,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn backbone_blocks(&self) -> usize {
        self.backbone_blocks
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn prunable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.prunable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn set_freeze_policy(&mut self, policy: FreezePolicy) {
        let last = self.backbone_blocks;
        for p in &mut self.params {
            p.trainable = match (policy, p.block) {
                (FreezePolicy::Full, _) | (_, Block::Head) => true,
                (FreezePolicy::L0, Block::Backbone(b)) => b == last,
            };
        }
    }

    /// Record every parameter's current value as its initial snapshot. Allowed once.
    pub fn snapshot_init(&mut self) -> Result<()> {
        if self.params.iter().any(|p| p.init_snapshot.is_some()) {
            return Err(Error::Contract(
                "init snapshot already taken; it is immutable".into(),
            ));
        }
        for p in &mut self.params {
            p.init_snapshot = Some(p.value.clone());
        }
        Ok(())
    }

    pub fn has_snapshot(&self) -> bool {
        !self.params.is_empty() && self.params.iter().all(|p| p.init_snapshot.is_some())
    }

    /// Forward pass over `input[N×C×H×W]`. Trainable parameters become gradient
    /// leaves; frozen ones become constants.
    pub fn forward<R: Rng + ?Sized>(&self, input: Tensor, mode: Mode, rng: &mut R) -> Result<Forward> {
        let s = input.shape();
        if s.len() != 4 || s[1..] != self.input_shape {
            return Err(Error::Dimension(format!(
                "network expects [N, {}, {}, {}] input, got {s:?}",
                self.input_shape[0], self.input_shape[1], self.input_shape[2]
            )));
        }
        let mut graph = Graph::new();
        let mut bindings = Vec::with_capacity(self.params.len());
        let mut bind = |graph: &mut Graph, idx: usize| {
            let p = &self.params[idx];
            let v = if p.trainable {
                graph.leaf(p.value.clone())
            } else {
                graph.constant(p.value.clone())
            };
            bindings.push((idx, v));
            v
        };
        let mut x = graph.constant(input);
        for layer in &self.layers {
            x = match layer.spec {
                LayerSpec::Conv { stride, padding, .. } => {
                    let w = bind(&mut graph, layer.weight.expect("conv has weight"));
                    let b = layer.bias.map(|i| bind(&mut graph, i));
                    graph.conv2d(x, w, b, stride, padding)?
                }
                LayerSpec::Linear { .. } => {
                    let w = bind(&mut graph, layer.weight.expect("linear has weight"));
                    let y = graph.matmul(x, w)?;
                    match layer.bias {
                        Some(i) => {
                            let b = bind(&mut graph, i);
                            graph.add_bias(y, b)?
                        }
                        None => y,
                    }
                }
                LayerSpec::Relu => graph.relu(x),
                LayerSpec::Dropout { rate } => graph.dropout(x, rate, mode, rng)?,
                LayerSpec::Flatten => graph.flatten(x)?,
                LayerSpec::Pool { size, stride } => graph.max_pool2d(x, size, stride)?,
            };
        }
        Ok(Forward {
            graph,
            logits: x,
            bindings,
        })
    }

    /// Reverse sweep from `loss`, adding masked gradients into each trainable
    /// parameter's `grad`. Calling it twice without [`Network::zero_grads`] doubles them.
    pub fn backward(&mut self, fwd: &Forward, loss: Var) -> Result<()> {
        let grads = fwd.graph.backward(loss)?;
        self.accumulate(fwd, &grads);
        Ok(())
    }

    fn accumulate(&mut self, fwd: &Forward, grads: &Gradients) {
        for &(idx, var) in &fwd.bindings {
            let Some(g) = grads.get(var) else { continue };
            let p = &mut self.params[idx];
            let mask = p.mask.data();
            for ((acc, &gv), &m) in p.grad.data_mut().iter_mut().zip(g.data()).zip(mask) {
                *acc += gv * m;
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Arg-max class per row of a logits matrix, ties to the lower index.
    pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
        let c = logits.shape()[1];
        logits
            .data()
            .chunks_exact(c)
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    /// Evaluation-mode predictions.
    pub fn predict(&self, input: Tensor) -> Result<Vec<usize>> {
        // eval mode never draws from the rng
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let fwd = self.forward(input, Mode::Eval, &mut rng)?;
        Ok(Self::argmax_rows(fwd.graph.value(fwd.logits)))
    }

    /// Serialize values, masks, init snapshots and trainable/prunable flags.
    pub fn to_table(&self) -> TensorTable {
        let mut t = TensorTable::new();
        for p in &self.params {
            let dims = p.value.shape();
            t.push(p.name.clone(), dims, TableData::F32(p.value.data().to_vec()));
            t.push(
                format!("{}.mask", p.name),
                dims,
                TableData::U8(p.mask.data().iter().map(|&m| (m != 0.0) as u8).collect()),
            );
            if let Some(s) = &p.init_snapshot {
                t.push(format!("{}.init", p.name), dims, TableData::F32(s.data().to_vec()));
            }
            t.push(
                format!("{}.flags", p.name),
                &[2],
                TableData::U8(vec![p.trainable as u8, p.prunable as u8]),
            );
        }
        t
    }

    /// Restore state written by [`Network::to_table`]. All mismatches are reported
    /// together and nothing is modified unless the whole table fits.
    pub fn load_table(&mut self, table: &TensorTable) -> Result<()> {
        let mut problems = Vec::new();
        for p in &self.params {
            let dims = p.value.shape();
            for (suffix, want_u8) in [("", false), (".mask", true), (".flags", true)] {
                let name = format!("{}{suffix}", p.name);
                let want_dims: &[usize] = if suffix == ".flags" { &[2] } else { dims };
                match table.get(&name) {
                    None => problems.push(format!("{name}: missing")),
                    Some(e) if e.dims != want_dims => problems.push(format!(
                        "{name}: shape {:?} in file, {:?} in network",
                        e.dims, want_dims
                    )),
                    Some(e) if matches!(e.data, TableData::U8(_)) != want_u8 => {
                        problems.push(format!("{name}: wrong dtype"))
                    }
                    _ => {}
                }
            }
            if let Some(e) = table.get(&format!("{}.init", p.name)) {
                if e.dims != dims {
                    problems.push(format!(
                        "{}.init: shape {:?} in file, {:?} in network",
                        p.name, e.dims, dims
                    ));
                }
            }
        }
        let known: Vec<&str> = self.params.iter().map(|p| p.name.as_str()).collect();
        for e in table.entries() {
            let base = e
                .name
                .strip_suffix(".mask")
                .or_else(|| e.name.strip_suffix(".init"))
                .or_else(|| e.name.strip_suffix(".flags"))
                .unwrap_or(&e.name);
            let optimizer = e.name.starts_with("adam.")
                || e.name.ends_with(".m")
                || e.name.ends_with(".v");
            if !optimizer && !known.contains(&base) {
                problems.push(format!("{}: not in network", e.name));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Load(problems.join("; ")));
        }
        for p in &mut self.params {
            let dims = p.value.shape().to_vec();
            if let Some(TableData::F32(v)) = table.get(&p.name).map(|e| &e.data) {
                p.value = Tensor::new(dims.clone(), v.clone())?;
            }
            if let Some(TableData::U8(m)) = table.get(&format!("{}.mask", p.name)).map(|e| &e.data) {
                if m.iter().any(|&b| b > 1) {
                    return Err(Error::Format(format!("{}.mask holds non-binary bytes", p.name)));
                }
                p.mask = Tensor::new(dims.clone(), m.iter().map(|&b| b as f32).collect())?;
            }
            if let Some(TableData::U8(f)) = table.get(&format!("{}.flags", p.name)).map(|e| &e.data) {
                p.trainable = f[0] != 0;
                p.prunable = f[1] != 0;
            }
            p.init_snapshot = match table.get(&format!("{}.init", p.name)).map(|e| &e.data) {
                Some(TableData::F32(v)) => Some(Tensor::new(dims.clone(), v.clone())?),
                _ => None,
            };
            p.grad = Tensor::zeros(&dims);
        }
        Ok(())
    }

    pub fn save_weights(&self, path: &Path) -> Result<()> {
        self.to_table().write(path)
    }

    pub fn load_weights(&mut self, path: &Path) -> Result<()> {
        self.load_table(&TensorTable::read(path)?)
    }
}

fn uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt() as f32;
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}
