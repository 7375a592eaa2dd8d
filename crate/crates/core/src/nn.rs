//! Network construction: dense/conv/pool stacks and residual chains with
//! convex aggregation. Hidden activations are positively homogeneous (ReLU,
//! max pooling), the output layer is linear.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels;
use crate::rng;
use crate::tape::{conv2d_forward, maxpool2d_forward, Tape, Var};
use crate::tensor::Tensor;

/// Shortcut of a residual block: identity (dimension-preserving) or a
/// learned projection (the entry block of a chain).
#[derive(Clone, Debug)]
pub enum Shortcut {
    Identity,
    Project { w3: Tensor },
}

/// How shortcut and branch are combined. `Convex` carries trainable logits
/// with alpha = sigma(l_a - l_b), beta = 1 - alpha, so alpha + beta == 1 by
/// construction and both stay in (0,1). `Fixed { 1, 1 }` is the standard
/// (non-convex) residual sum.
#[derive(Clone, Debug)]
pub enum Aggregation {
    Convex { l_a: Tensor, l_b: Tensor },
    Fixed { alpha: f64, beta: f64 },
}

impl Aggregation {
    pub fn convex(l_a: f64, l_b: f64) -> Self {
        Aggregation::Convex {
            l_a: Tensor::scalar(l_a),
            l_b: Tensor::scalar(l_b),
        }
    }

    pub fn standard() -> Self {
        Aggregation::Fixed { alpha: 1.0, beta: 1.0 }
    }

    /// Current (alpha, beta).
    pub fn weights(&self) -> (f64, f64) {
        match self {
            Aggregation::Convex { l_a, l_b } => {
                let d = l_a.item() - l_b.item();
                let alpha = 1.0 / (1.0 + (-d).exp());
                (alpha, 1.0 - alpha)
            }
            Aggregation::Fixed { alpha, beta } => (*alpha, *beta),
        }
    }
}

/// Residual block: out = alpha·shortcut(x) + beta·W2 φ(W1 φ?(x)).
/// `pre_activation` applies φ to the block input before the branch (the
/// chained form); the entry block feeds x directly.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub w1: Tensor,
    pub b1: Option<Tensor>,
    pub w2: Tensor,
    pub b2: Option<Tensor>,
    pub shortcut: Shortcut,
    pub pre_activation: bool,
    pub agg: Aggregation,
}

impl ResidualBlock {
    pub fn dim_out(&self) -> usize {
        self.w2.rows()
    }
}

#[derive(Clone, Debug)]
pub enum Layer {
    Dense { w: Tensor, bias: Option<Tensor> },
    Conv2d { kernel: Tensor, bias: Option<Tensor>, stride: usize, padding: usize },
    Relu,
    MaxPool2d { window: usize, stride: usize },
    Flatten,
    Residual(ResidualBlock),
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::Conv2d { .. } => "conv2d",
            Layer::Relu => "relu",
            Layer::MaxPool2d { .. } => "maxpool2d",
            Layer::Flatten => "flatten",
            Layer::Residual(_) => "residual_block",
        }
    }
}

/// Which role a regularized weight tensor plays; the CNN weight-energy
/// variant treats convolution kernels and dense matrices differently.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightKind {
    Dense,
    Conv,
}

/// A view of one regularized weight tensor (biases and aggregation logits
/// are never regularized).
pub struct WeightRef<'a> {
    pub tensor: &'a Tensor,
    pub kind: WeightKind,
    pub layer_index: usize,
}

/// Structure-only description of a layer, serialized as the JSON sidecar of
/// the weights container.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { in_dim: usize, out_dim: usize, bias: bool },
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize, bias: bool },
    Relu,
    MaxPool2d { window: usize, stride: usize },
    Flatten,
    ResidualBlock {
        dim_in: usize,
        hidden: usize,
        dim_out: usize,
        bias: bool,
        pre_activation: bool,
        shortcut: ShortcutSpec,
        aggregation: AggSpec,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShortcutSpec {
    Identity,
    Project,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum AggSpec {
    Convex,
    Fixed { alpha: f64, beta: f64 },
}

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitScheme {
    /// W ~ N(0, sqrt(2 / fan_in)), biases zero.
    He,
    /// He on branch entry weights, zeros on each residual block's W2 so
    /// every block starts as a pure (scaled) shortcut.
    FixupLike,
    Constant(f64),
}

/// A feedforward network: ordered layers over a fixed input shape.
#[derive(Clone, Debug)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
}

impl Network {
    /// Validates chain compatibility of the layer dims while walking the
    /// (batchless) shape through every layer.
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        let net = Network { input_shape, layers };
        net.output_shape()?;
        Ok(net)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn output_dim(&self) -> usize {
        self.output_shape().expect("validated at construction").iter().product()
    }

    fn output_shape(&self) -> Result<Vec<usize>> {
        let mut shape = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            shape = walk_layer_shape(layer, &shape, i)?;
        }
        Ok(shape)
    }

    // ── Parameters ──────────────────────────────────────────────────────

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Dense { w, bias } => {
                    out.push(w);
                    out.extend(bias.iter());
                }
                Layer::Conv2d { kernel, bias, .. } => {
                    out.push(kernel);
                    out.extend(bias.iter());
                }
                Layer::Residual(b) => {
                    out.push(&b.w1);
                    out.extend(b.b1.iter());
                    out.push(&b.w2);
                    out.extend(b.b2.iter());
                    if let Shortcut::Project { w3 } = &b.shortcut {
                        out.push(w3);
                    }
                    if let Aggregation::Convex { l_a, l_b } = &b.agg {
                        out.push(l_a);
                        out.push(l_b);
                    }
                }
                _ => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Dense { w, bias } => {
                    out.push(w);
                    out.extend(bias.iter_mut());
                }
                Layer::Conv2d { kernel, bias, .. } => {
                    out.push(kernel);
                    out.extend(bias.iter_mut());
                }
                Layer::Residual(b) => {
                    out.push(&mut b.w1);
                    out.extend(b.b1.iter_mut());
                    out.push(&mut b.w2);
                    out.extend(b.b2.iter_mut());
                    if let Shortcut::Project { w3 } = &mut b.shortcut {
                        out.push(w3);
                    }
                    if let Aggregation::Convex { l_a, l_b } = &mut b.agg {
                        out.push(l_a);
                        out.push(l_b);
                    }
                }
                _ => {}
            }
        }
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Dense { bias, .. } => {
                    out.push(format!("layer{i}.w"));
                    if bias.is_some() {
                        out.push(format!("layer{i}.b"));
                    }
                }
                Layer::Conv2d { bias, .. } => {
                    out.push(format!("layer{i}.kernel"));
                    if bias.is_some() {
                        out.push(format!("layer{i}.b"));
                    }
                }
                Layer::Residual(b) => {
                    out.push(format!("layer{i}.w1"));
                    if b.b1.is_some() {
                        out.push(format!("layer{i}.b1"));
                    }
                    out.push(format!("layer{i}.w2"));
                    if b.b2.is_some() {
                        out.push(format!("layer{i}.b2"));
                    }
                    if matches!(b.shortcut, Shortcut::Project { .. }) {
                        out.push(format!("layer{i}.w3"));
                    }
                    if matches!(b.agg, Aggregation::Convex { .. }) {
                        out.push(format!("layer{i}.l_a"));
                        out.push(format!("layer{i}.l_b"));
                    }
                }
                _ => {}
            }
        }
        out
    }

    /// Position of each [`Network::weights`] entry inside [`Network::params`].
    pub fn weight_param_indices(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut pi = 0usize;
        for layer in &self.layers {
            match layer {
                Layer::Dense { bias, .. } => {
                    out.push(pi);
                    pi += 1 + usize::from(bias.is_some());
                }
                Layer::Conv2d { bias, .. } => {
                    out.push(pi);
                    pi += 1 + usize::from(bias.is_some());
                }
                Layer::Residual(b) => {
                    out.push(pi);
                    pi += 1 + usize::from(b.b1.is_some());
                    out.push(pi);
                    pi += 1 + usize::from(b.b2.is_some());
                    if matches!(b.shortcut, Shortcut::Project { .. }) {
                        out.push(pi);
                        pi += 1;
                    }
                    if matches!(b.agg, Aggregation::Convex { .. }) {
                        pi += 2;
                    }
                }
                _ => {}
            }
        }
        out
    }

    /// Regularized weight tensors in layer order: dense matrices, conv
    /// kernels, and each residual block's W1/W2(/W3). Biases and
    /// aggregation logits are excluded.
    pub fn weights(&self) -> Vec<WeightRef<'_>> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Dense { w, .. } => out.push(WeightRef { tensor: w, kind: WeightKind::Dense, layer_index: i }),
                Layer::Conv2d { kernel, .. } => {
                    out.push(WeightRef { tensor: kernel, kind: WeightKind::Conv, layer_index: i })
                }
                Layer::Residual(b) => {
                    out.push(WeightRef { tensor: &b.w1, kind: WeightKind::Dense, layer_index: i });
                    out.push(WeightRef { tensor: &b.w2, kind: WeightKind::Dense, layer_index: i });
                    if let Shortcut::Project { w3 } = &b.shortcut {
                        out.push(WeightRef { tensor: w3, kind: WeightKind::Dense, layer_index: i });
                    }
                }
                _ => {}
            }
        }
        out
    }

    // ── Initialization ──────────────────────────────────────────────────

    /// Fill parameters for the given scheme; reproducible from the seed.
    pub fn init(&mut self, scheme: InitScheme, seed: u64) {
        let mut rng = rng::stream(seed, "init");
        let fill_normal = |t: &mut Tensor, fan_in: usize, rng: &mut rand_chacha::ChaCha12Rng| {
            let std = (2.0 / fan_in as f64).sqrt();
            let dist = Normal::new(0.0, std).expect("std > 0");
            for v in t.data_mut() {
                *v = dist.sample(rng);
            }
        };
        for layer in &mut self.layers {
            match layer {
                Layer::Dense { w, bias } => {
                    match scheme {
                        InitScheme::He | InitScheme::FixupLike => {
                            let fan_in = w.cols();
                            fill_normal(w, fan_in, &mut rng);
                            if let Some(b) = bias {
                                b.data_mut().fill(0.0);
                            }
                        }
                        InitScheme::Constant(c) => {
                            w.data_mut().fill(c);
                            if let Some(b) = bias {
                                b.data_mut().fill(c);
                            }
                        }
                    }
                }
                Layer::Conv2d { kernel, bias, .. } => match scheme {
                    InitScheme::He | InitScheme::FixupLike => {
                        let s = kernel.shape();
                        let fan_in = s[0] * s[1] * s[2];
                        fill_normal(kernel, fan_in, &mut rng);
                        if let Some(b) = bias {
                            b.data_mut().fill(0.0);
                        }
                    }
                    InitScheme::Constant(c) => {
                        kernel.data_mut().fill(c);
                        if let Some(b) = bias {
                            b.data_mut().fill(c);
                        }
                    }
                },
                Layer::Residual(b) => match scheme {
                    InitScheme::He | InitScheme::FixupLike => {
                        let fan1 = b.w1.cols();
                        fill_normal(&mut b.w1, fan1, &mut rng);
                        if scheme == InitScheme::FixupLike {
                            b.w2.data_mut().fill(0.0);
                        } else {
                            let fan2 = b.w2.cols();
                            fill_normal(&mut b.w2, fan2, &mut rng);
                        }
                        if let Shortcut::Project { w3 } = &mut b.shortcut {
                            let fan3 = w3.cols();
                            fill_normal(w3, fan3, &mut rng);
                        }
                        for bias in [&mut b.b1, &mut b.b2].into_iter().flatten() {
                            bias.data_mut().fill(0.0);
                        }
                        if let Aggregation::Convex { l_a, l_b } = &mut b.agg {
                            l_a.data_mut().fill(0.0);
                            l_b.data_mut().fill(0.0);
                        }
                    }
                    InitScheme::Constant(c) => {
                        b.w1.data_mut().fill(c);
                        b.w2.data_mut().fill(c);
                        if let Shortcut::Project { w3 } = &mut b.shortcut {
                            w3.data_mut().fill(c);
                        }
                        for bias in [&mut b.b1, &mut b.b2].into_iter().flatten() {
                            bias.data_mut().fill(c);
                        }
                        if let Aggregation::Convex { l_a, l_b } = &mut b.agg {
                            l_a.data_mut().fill(c);
                            l_b.data_mut().fill(c);
                        }
                    }
                },
                _ => {}
            }
        }
    }

    // ── Forward (no tape) ───────────────────────────────────────────────

    /// Logits for a batch; `x` is [B, input_shape...].
    pub fn forward_batch(&self, x: &Tensor) -> Result<Tensor> {
        if x.rank() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            return Err(Error::ShapeMismatch {
                op: "forward_batch",
                lhs: x.shape().to_vec(),
                rhs: self.input_shape.clone(),
            });
        }
        let mut h = x.clone();
        for layer in &self.layers {
            h = eval_layer(layer, &h)?;
        }
        Ok(h)
    }

    /// Logits for one example; `x` has the input shape.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape() != self.input_shape {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: x.shape().to_vec(),
                rhs: self.input_shape.clone(),
            });
        }
        let mut shape = vec![1];
        shape.extend_from_slice(x.shape());
        let batched = x.reshaped(&shape)?;
        let out = self.forward_batch(&batched)?;
        let flat = out.numel();
        out.reshaped(&[flat])
    }

    // ── Forward (traced) ────────────────────────────────────────────────

    /// Insert every parameter as a tape leaf, in `params()` order.
    pub fn stage_params(&self, tape: &Tape, requires_grad: bool) -> Vec<Var> {
        self.params()
            .into_iter()
            .map(|t| tape.leaf(t.clone(), requires_grad))
            .collect()
    }

    /// Build the forward graph on `tape` for batched input `x`, consuming
    /// the staged parameter vars (same order as [`Network::params`]).
    pub fn trace(&self, tape: &Tape, params: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        let mut pi = 0usize;
        let next = |pi: &mut usize| {
            let v = params[*pi];
            *pi += 1;
            v
        };
        for layer in &self.layers {
            h = match layer {
                Layer::Dense { bias, .. } => {
                    let w = next(&mut pi);
                    let b = bias.as_ref().map(|_| next(&mut pi));
                    tape.linear(h, w, b)?
                }
                Layer::Conv2d { bias, stride, padding, .. } => {
                    let k = next(&mut pi);
                    let b = bias.as_ref().map(|_| next(&mut pi));
                    tape.conv2d(h, k, b, *stride, *padding)?
                }
                Layer::Relu => tape.relu(h)?,
                Layer::MaxPool2d { window, stride } => tape.maxpool2d(h, *window, *stride)?,
                Layer::Flatten => {
                    let shape = tape.shape_of(h);
                    let rest: usize = shape[1..].iter().product();
                    tape.reshape(h, &[shape[0], rest])?
                }
                Layer::Residual(block) => {
                    let w1 = next(&mut pi);
                    let b1 = block.b1.as_ref().map(|_| next(&mut pi));
                    let w2 = next(&mut pi);
                    let b2 = block.b2.as_ref().map(|_| next(&mut pi));
                    let w3 = match block.shortcut {
                        Shortcut::Project { .. } => Some(next(&mut pi)),
                        Shortcut::Identity => None,
                    };
                    let logits = match block.agg {
                        Aggregation::Convex { .. } => Some((next(&mut pi), next(&mut pi))),
                        Aggregation::Fixed { .. } => None,
                    };
                    let branch_in = if block.pre_activation { tape.relu(h)? } else { h };
                    let a1 = tape.relu(tape.linear(branch_in, w1, b1)?)?;
                    let branch = tape.linear(a1, w2, b2)?;
                    let sc = match w3 {
                        Some(w3) => tape.linear(h, w3, None)?,
                        None => h,
                    };
                    match (&block.agg, logits) {
                        (Aggregation::Convex { .. }, Some((l_a, l_b))) => {
                            let alpha = tape.sigmoid(tape.sub(l_a, l_b)?)?;
                            let beta = tape.affine(alpha, -1.0, 1.0)?;
                            tape.add(tape.mul_scalar(alpha, sc)?, tape.mul_scalar(beta, branch)?)?
                        }
                        (Aggregation::Fixed { alpha, beta }, _) => {
                            tape.add(tape.scale(sc, *alpha)?, tape.scale(branch, *beta)?)?
                        }
                        _ => unreachable!(),
                    }
                }
            };
        }
        debug_assert_eq!(pi, params.len(), "trace consumed all staged params");
        Ok(h)
    }

    // ── Structure specs & serialization ─────────────────────────────────

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        self.layers
            .iter()
            .map(|layer| match layer {
                Layer::Dense { w, bias } => LayerSpec::Dense {
                    in_dim: w.cols(),
                    out_dim: w.rows(),
                    bias: bias.is_some(),
                },
                Layer::Conv2d { kernel, bias, stride, padding } => LayerSpec::Conv2d {
                    in_channels: kernel.shape()[2],
                    out_channels: kernel.shape()[3],
                    kernel: kernel.shape()[0],
                    stride: *stride,
                    padding: *padding,
                    bias: bias.is_some(),
                },
                Layer::Relu => LayerSpec::Relu,
                Layer::MaxPool2d { window, stride } => LayerSpec::MaxPool2d {
                    window: *window,
                    stride: *stride,
                },
                Layer::Flatten => LayerSpec::Flatten,
                Layer::Residual(b) => LayerSpec::ResidualBlock {
                    dim_in: b.w1.cols(),
                    hidden: b.w1.rows(),
                    dim_out: b.w2.rows(),
                    bias: b.b1.is_some(),
                    pre_activation: b.pre_activation,
                    shortcut: match b.shortcut {
                        Shortcut::Identity => ShortcutSpec::Identity,
                        Shortcut::Project { .. } => ShortcutSpec::Project,
                    },
                    aggregation: match b.agg {
                        Aggregation::Convex { .. } => AggSpec::Convex,
                        Aggregation::Fixed { alpha, beta } => AggSpec::Fixed { alpha, beta },
                    },
                },
            })
            .collect()
    }

    /// Build a zero-initialized network from structure specs.
    pub fn from_specs(input_shape: Vec<usize>, specs: &[LayerSpec]) -> Result<Self> {
        let layers = specs
            .iter()
            .map(|spec| match *spec {
                LayerSpec::Dense { in_dim, out_dim, bias } => Layer::Dense {
                    w: Tensor::zeros(&[out_dim, in_dim]),
                    bias: bias.then(|| Tensor::zeros(&[out_dim])),
                },
                LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding, bias } => Layer::Conv2d {
                    kernel: Tensor::zeros(&[kernel, kernel, in_channels, out_channels]),
                    bias: bias.then(|| Tensor::zeros(&[out_channels])),
                    stride,
                    padding,
                },
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::MaxPool2d { window, stride } => Layer::MaxPool2d { window, stride },
                LayerSpec::Flatten => Layer::Flatten,
                LayerSpec::ResidualBlock {
                    dim_in,
                    hidden,
                    dim_out,
                    bias,
                    pre_activation,
                    shortcut,
                    aggregation,
                } => Layer::Residual(ResidualBlock {
                    w1: Tensor::zeros(&[hidden, dim_in]),
                    b1: bias.then(|| Tensor::zeros(&[hidden])),
                    w2: Tensor::zeros(&[dim_out, hidden]),
                    b2: bias.then(|| Tensor::zeros(&[dim_out])),
                    shortcut: match shortcut {
                        ShortcutSpec::Identity => Shortcut::Identity,
                        ShortcutSpec::Project => Shortcut::Project {
                            w3: Tensor::zeros(&[dim_out, dim_in]),
                        },
                    },
                    pre_activation,
                    agg: match aggregation {
                        AggSpec::Convex => Aggregation::convex(0.0, 0.0),
                        AggSpec::Fixed { alpha, beta } => Aggregation::Fixed { alpha, beta },
                    },
                }),
            })
            .collect();
        Network::new(input_shape, layers)
    }

    /// Write weights to `<path>` (binary container) and the LayerSpec list
    /// to `<path with .json extension>`.
    ///
    /// Container layout, all little-endian:
    /// magic `WSSI` | version u32 | tensor count u32 | per tensor:
    /// dtype u8 (1 = f64) | ndim u8 | dims u32[ndim] | data f64[numel].
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(b"WSSI");
        buf.extend_from_slice(&1u32.to_le_bytes());
        let params = self.params();
        buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for t in params {
            buf.push(1u8);
            buf.push(t.rank() as u8);
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, buf)?;
        let sidecar = SidecarSpec {
            input_shape: self.input_shape.clone(),
            layers: self.layer_specs(),
        };
        fs::write(sidecar_path(path), serde_json::to_vec_pretty(&sidecar)?)?;
        Ok(())
    }

    /// Load a network saved by [`Network::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let sidecar: SidecarSpec = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
        let mut net = Network::from_specs(sidecar.input_shape, &sidecar.layers)?;
        let mut file = fs::File::open(path)?;
        let mut magic = [0u8; 4];
        file.read_exact(&mut magic)?;
        if &magic != b"WSSI" {
            return Err(Error::BadContainer(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut file)?;
        if version != 1 {
            return Err(Error::BadContainer(format!("unsupported version {version}")));
        }
        let count = read_u32(&mut file)? as usize;
        let mut params = net.params_mut();
        if count != params.len() {
            return Err(Error::BadContainer(format!(
                "container holds {count} tensors, structure wants {}",
                params.len()
            )));
        }
        for t in params.iter_mut() {
            let mut hdr = [0u8; 2];
            file.read_exact(&mut hdr)?;
            if hdr[0] != 1 {
                return Err(Error::BadContainer(format!("unsupported dtype {}", hdr[0])));
            }
            let ndim = hdr[1] as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(read_u32(&mut file)? as usize);
            }
            if dims != t.shape() {
                return Err(Error::BadContainer(format!(
                    "tensor shape {dims:?} does not match structure {:?}",
                    t.shape()
                )));
            }
            let mut raw = vec![0u8; t.numel() * 8];
            file.read_exact(&mut raw)?;
            for (v, chunk) in t.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
                *v = f64::from_le_bytes(chunk.try_into().unwrap());
            }
        }
        Ok(net)
    }
}

#[derive(Serialize, Deserialize)]
struct SidecarSpec {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

// unused Write import guard for older toolchains
#[allow(unused)]
fn _write_hint(_w: &mut dyn Write) {}

fn walk_layer_shape(layer: &Layer, shape: &[usize], index: usize) -> Result<Vec<usize>> {
    let mismatch = |rhs: Vec<usize>| Error::ShapeMismatch {
        op: "network chain",
        lhs: shape.to_vec(),
        rhs,
    };
    match layer {
        Layer::Dense { w, .. } => {
            if shape.len() != 1 || shape[0] != w.cols() {
                return Err(mismatch(vec![w.rows(), w.cols()]));
            }
            Ok(vec![w.rows()])
        }
        Layer::Conv2d { kernel, bias, stride, padding } => {
            let probe = Tensor::zeros(shape);
            let out = conv2d_forward(&probe, kernel, bias.as_ref().map(|b| b.data()), *stride, *padding)?;
            Ok(out.shape().to_vec())
        }
        Layer::Relu => Ok(shape.to_vec()),
        Layer::MaxPool2d { window, stride } => {
            let probe = Tensor::zeros(shape);
            let (out, _) = maxpool2d_forward(&probe, *window, *stride)?;
            Ok(out.shape().to_vec())
        }
        Layer::Flatten => Ok(vec![shape.iter().product()]),
        Layer::Residual(b) => {
            if shape.len() != 1 || shape[0] != b.w1.cols() {
                return Err(mismatch(vec![b.w1.rows(), b.w1.cols()]));
            }
            if b.w2.cols() != b.w1.rows() {
                return Err(mismatch(vec![b.w2.rows(), b.w2.cols()]));
            }
            match &b.shortcut {
                Shortcut::Identity => {
                    if b.w2.rows() != shape[0] {
                        return Err(Error::InvalidArgument {
                            op: "residual_block",
                            message: format!(
                                "identity shortcut needs dim_in == dim_out, got {} vs {} at layer {index}",
                                shape[0],
                                b.w2.rows()
                            ),
                        });
                    }
                }
                Shortcut::Project { w3 } => {
                    if w3.cols() != shape[0] || w3.rows() != b.w2.rows() {
                        return Err(mismatch(vec![w3.rows(), w3.cols()]));
                    }
                }
            }
            Ok(vec![b.w2.rows()])
        }
    }
}

fn eval_layer(layer: &Layer, h: &Tensor) -> Result<Tensor> {
    match layer {
        Layer::Dense { w, bias } => dense_forward(h, w, bias.as_ref()),
        Layer::Conv2d { kernel, bias, stride, padding } => {
            conv2d_forward(h, kernel, bias.as_ref().map(|b| b.data()), *stride, *padding)
        }
        Layer::Relu => Ok(h.map(|v| v.max(0.0))),
        Layer::MaxPool2d { window, stride } => Ok(maxpool2d_forward(h, *window, *stride)?.0),
        Layer::Flatten => {
            let rest: usize = h.shape()[1..].iter().product();
            h.reshaped(&[h.shape()[0], rest])
        }
        Layer::Residual(b) => {
            let branch_in = if b.pre_activation { h.map(|v| v.max(0.0)) } else { h.clone() };
            let a1 = dense_forward(&branch_in, &b.w1, b.b1.as_ref())?.map(|v| v.max(0.0));
            let branch = dense_forward(&a1, &b.w2, b.b2.as_ref())?;
            let sc = match &b.shortcut {
                Shortcut::Identity => h.clone(),
                Shortcut::Project { w3 } => dense_forward(h, w3, None)?,
            };
            let (alpha, beta) = b.agg.weights();
            sc.scale(alpha).add(&branch.scale(beta))
        }
    }
}

pub(crate) fn dense_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    if x.rank() != 2 || x.cols() != w.cols() {
        return Err(Error::ShapeMismatch {
            op: "dense",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let (bsz, fan_in, fan_out) = (x.rows(), x.cols(), w.rows());
    let mut out = vec![0.0; bsz * fan_out];
    if let Some(b) = bias {
        for row in out.chunks_exact_mut(fan_out) {
            row.copy_from_slice(b.data());
        }
    }
    kernels::matmul_nt(x.data(), w.data(), &mut out, bsz, fan_in, fan_out);
    Tensor::new(vec![bsz, fan_out], out)
}

// ── Architecture builders ───────────────────────────────────────────────

/// Dense/ReLU chain: dims = [in, h1, ..., out], linear output layer.
pub fn mlp(dims: &[usize], bias: bool) -> Result<Network> {
    if dims.len() < 2 {
        return Err(Error::InvalidArgument {
            op: "mlp",
            message: "need at least input and output dims".into(),
        });
    }
    let mut layers = Vec::new();
    for i in 0..dims.len() - 1 {
        layers.push(Layer::Dense {
            w: Tensor::zeros(&[dims[i + 1], dims[i]]),
            bias: bias.then(|| Tensor::zeros(&[dims[i + 1]])),
        });
        if i + 2 < dims.len() {
            layers.push(Layer::Relu);
        }
    }
    Network::new(vec![dims[0]], layers)
}

/// Residual chain: a projection entry block (x -> dim), `depth` identity
/// blocks, then φ and a dense head. With `convex` the aggregation scalars
/// are trainable logits; otherwise blocks use the standard fixed sum.
/// `aggregate_first` applies the aggregation pair to the entry block too
/// (the plain entry form keeps alpha = beta = 1).
pub fn residual_chain(
    input_dim: usize,
    dim: usize,
    hidden: usize,
    depth: usize,
    classes: usize,
    convex: bool,
    aggregate_first: bool,
    bias: bool,
) -> Result<Network> {
    let agg = |on: bool| if on { Aggregation::convex(0.0, 0.0) } else { Aggregation::standard() };
    let mut layers = Vec::new();
    layers.push(Layer::Residual(ResidualBlock {
        w1: Tensor::zeros(&[hidden, input_dim]),
        b1: bias.then(|| Tensor::zeros(&[hidden])),
        w2: Tensor::zeros(&[dim, hidden]),
        b2: bias.then(|| Tensor::zeros(&[dim])),
        shortcut: Shortcut::Project {
            w3: Tensor::zeros(&[dim, input_dim]),
        },
        pre_activation: false,
        agg: agg(convex && aggregate_first),
    }));
    for _ in 0..depth {
        layers.push(Layer::Residual(ResidualBlock {
            w1: Tensor::zeros(&[hidden, dim]),
            b1: bias.then(|| Tensor::zeros(&[hidden])),
            w2: Tensor::zeros(&[dim, hidden]),
            b2: bias.then(|| Tensor::zeros(&[dim])),
            shortcut: Shortcut::Identity,
            pre_activation: true,
            agg: agg(convex),
        }));
    }
    layers.push(Layer::Relu);
    layers.push(Layer::Dense {
        w: Tensor::zeros(&[classes, dim]),
        bias: bias.then(|| Tensor::zeros(&[classes])),
    });
    Network::new(vec![input_dim], layers)
}

/// Random dense/ReLU chain for property tests: 2..=6 weight layers with
/// small random widths, He-initialized.
pub fn random_mlp(rng: &mut impl Rng, bias: bool) -> Network {
    let depth = rng.gen_range(2..=6usize);
    let mut dims = Vec::with_capacity(depth + 1);
    for _ in 0..=depth {
        dims.push(rng.gen_range(2..=10usize));
    }
    let mut net = mlp(&dims, bias).expect("valid dims");
    let seed = rng.gen::<u64>();
    net.init(InitScheme::He, seed);
    if bias {
        let mut brng = rng::stream(seed, "bias");
        for layer in net.layers_mut() {
            if let Layer::Dense { bias: Some(b), .. } = layer {
                for v in b.data_mut() {
                    *v = brng.gen_range(-0.5..0.5);
                }
            }
        }
    }
    net
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Reduction;

    #[test]
    fn identity_dense_layer_is_identity() {
        let net = Network::new(
            vec![3],
            vec![Layer::Dense {
                w: Tensor::eye(3),
                bias: None,
            }],
        )
        .unwrap();
        let x = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let y = net.forward(&x).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn mnist_mlp_zero_input_zero_bias_gives_zero_logits() {
        let mut net = mlp(&[784, 1024, 1024, 10], true).unwrap();
        net.init(InitScheme::He, 3);
        let x = Tensor::zeros(&[784]);
        let y = net.forward(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_layer_hand_computed() {
        // 2 inputs -> 3 hidden (relu) -> 1 output
        let w1 = Tensor::from_rows(&[&[1.0, -1.0], &[0.5, 0.5], &[-2.0, 1.0]]).unwrap();
        let w2 = Tensor::from_rows(&[&[1.0, 2.0, 3.0]]).unwrap();
        let net = Network::new(
            vec![2],
            vec![
                Layer::Dense { w: w1, bias: None },
                Layer::Relu,
                Layer::Dense { w: w2, bias: None },
            ],
        )
        .unwrap();
        let x = Tensor::new(vec![2], vec![2.0, 1.0]).unwrap();
        // hidden pre-act: [1, 1.5, -3] -> relu [1, 1.5, 0]; out = 1 + 3 = 4
        let y = net.forward(&x).unwrap();
        assert!((y.data()[0] - 4.0).abs() < 1e-15);
    }

    #[test]
    fn chain_incompatibility_rejected() {
        let r = Network::new(
            vec![4],
            vec![Layer::Dense {
                w: Tensor::zeros(&[2, 3]),
                bias: None,
            }],
        );
        assert!(r.is_err());
    }

    #[test]
    fn he_init_reproducible() {
        let mut a = mlp(&[5, 7, 3], true).unwrap();
        let mut b = mlp(&[5, 7, 3], true).unwrap();
        a.init(InitScheme::He, 42);
        b.init(InitScheme::He, 42);
        for (p, q) in a.params().iter().zip(b.params()) {
            assert_eq!(p.data(), q.data());
        }
        let mut c = mlp(&[5, 7, 3], true).unwrap();
        c.init(InitScheme::He, 43);
        assert_ne!(a.params()[0].data(), c.params()[0].data());
    }

    #[test]
    fn constant_zero_init_zeroes_everything() {
        let mut net = residual_chain(4, 6, 5, 2, 3, true, false, true).unwrap();
        net.init(InitScheme::Constant(0.0), 0);
        for p in net.params() {
            assert!(p.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn fixup_like_blocks_start_as_scaled_shortcut() {
        let mut net = residual_chain(4, 4, 8, 3, 2, true, false, false).unwrap();
        net.init(InitScheme::FixupLike, 9);
        // branch is zero: the chain output equals prod(alpha_l) * shortcut path
        let x = Tensor::new(vec![4], vec![0.3, -0.2, 0.9, 0.1]).unwrap();
        let y = net.forward(&x).unwrap();
        let mut alpha_prod = 1.0;
        let mut sc = None;
        let mut head: Option<&Tensor> = None;
        for layer in net.layers() {
            match layer {
                Layer::Residual(b) => {
                    let (a, _) = b.agg.weights();
                    match &b.shortcut {
                        Shortcut::Project { w3 } => {
                            sc = Some(dense_forward(&x.reshaped(&[1, 4]).unwrap(), w3, None).unwrap());
                            alpha_prod *= a;
                        }
                        Shortcut::Identity => alpha_prod *= a,
                    }
                }
                Layer::Dense { w, .. } => head = Some(w),
                _ => {}
            }
        }
        // entry block is Fixed{1,1}: its alpha multiplies once
        let hl = sc.unwrap().scale(alpha_prod);
        let phi = hl.map(|v| v.max(0.0));
        let want = dense_forward(&phi, head.unwrap(), None).unwrap();
        assert!(y.reshaped(&[1, 2]).unwrap().max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn convex_aggregation_sums_to_one_and_is_monotone() {
        let mut prev = 0.0;
        for d in [-4.0, -1.0, 0.0, 0.5, 2.0, 6.0] {
            let agg = Aggregation::convex(d, 0.0);
            let (a, b) = agg.weights();
            assert_eq!(a + b, 1.0);
            assert!(a > 0.0 && b > 0.0);
            assert!(a > prev || d == -4.0);
            prev = a;
        }
    }

    #[test]
    fn residual_alpha_one_is_pure_shortcut_chain() {
        // l_a >> l_b drives alpha -> 1; block weights become irrelevant
        let mut net = residual_chain(3, 3, 4, 2, 2, true, false, false).unwrap();
        net.init(InitScheme::He, 5);
        for layer in net.layers_mut() {
            if let Layer::Residual(b) = layer {
                if matches!(b.shortcut, Shortcut::Identity) {
                    b.agg = Aggregation::convex(60.0, 0.0);
                }
            }
        }
        let x = Tensor::new(vec![3], vec![0.4, 0.1, -0.7]).unwrap();
        let y = net.forward(&x).unwrap();
        // reference: drop identity blocks entirely
        let mut ref_layers = Vec::new();
        for layer in net.layers() {
            match layer {
                Layer::Residual(b) if matches!(b.shortcut, Shortcut::Identity) => {}
                l => ref_layers.push(l.clone()),
            }
        }
        let ref_net = Network::new(vec![3], ref_layers).unwrap();
        let want = ref_net.forward(&x).unwrap();
        assert!(y.max_abs_diff(&want) < 1e-9);
    }

    #[test]
    fn beta_one_limit_is_plain_feedforward() {
        let mut net = residual_chain(3, 3, 4, 1, 2, true, false, false).unwrap();
        net.init(InitScheme::He, 11);
        for layer in net.layers_mut() {
            if let Layer::Residual(b) = layer {
                if matches!(b.shortcut, Shortcut::Identity) {
                    b.agg = Aggregation::convex(-60.0, 0.0); // beta -> 1
                }
            }
        }
        let x = Tensor::new(vec![3], vec![1.0, -0.3, 0.2]).unwrap();
        let y = net.forward(&x).unwrap();
        // reference: replace the identity block with its branch composition
        let (w1, w2, entry) = {
            let mut it = net.layers().iter();
            let entry = it.next().unwrap().clone();
            match it.next().unwrap() {
                Layer::Residual(b) => (b.w1.clone(), b.w2.clone(), entry),
                _ => unreachable!(),
            }
        };
        let mut ref_layers = vec![entry, Layer::Relu];
        ref_layers.push(Layer::Dense { w: w1, bias: None });
        ref_layers.push(Layer::Relu);
        ref_layers.push(Layer::Dense { w: w2, bias: None });
        for layer in net.layers().iter().skip(2) {
            ref_layers.push(layer.clone());
        }
        let ref_net = Network::new(vec![3], ref_layers).unwrap();
        let want = ref_net.forward(&x).unwrap();
        assert!(y.max_abs_diff(&want) < 1e-9);
    }

    #[test]
    fn traced_forward_matches_plain_forward() {
        let mut rng = rng::stream(17, "test");
        for _ in 0..10 {
            let net = random_mlp(&mut rng, true);
            let d = net.input_dim();
            let xs = Tensor::new(
                vec![3, d],
                (0..3 * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let plain = net.forward_batch(&xs).unwrap();
            let tape = Tape::new();
            let params = net.stage_params(&tape, false);
            let x = tape.leaf(xs.clone(), false);
            let out = net.trace(&tape, &params, x).unwrap();
            assert_eq!(plain, tape.value_cloned(out));
        }
        // and a residual chain with biases
        let mut net = residual_chain(5, 6, 4, 2, 3, true, true, true).unwrap();
        net.init(InitScheme::He, 23);
        let xs = Tensor::new(vec![2, 5], (0..10).map(|i| (i as f64) / 7.0 - 0.6).collect()).unwrap();
        let plain = net.forward_batch(&xs).unwrap();
        let tape = Tape::new();
        let params = net.stage_params(&tape, true);
        let x = tape.leaf(xs, false);
        let out = net.trace(&tape, &params, x).unwrap();
        assert!(plain.max_abs_diff(&tape.value_cloned(out)) < 1e-12);
        // the traced graph also backprops through logits without error
        let loss = tape
            .softmax_cross_entropy(out, &[0, 2], Reduction::Mean)
            .unwrap();
        tape.backward(loss).unwrap();
    }

    #[test]
    fn save_load_roundtrip_bitexact() {
        let dir = tempfile::tempdir().unwrap();
        let mut net = residual_chain(4, 5, 3, 2, 2, true, false, true).unwrap();
        net.init(InitScheme::He, 77);
        let path = dir.path().join("model.wssi");
        net.save(&path).unwrap();
        let loaded = Network::load(&path).unwrap();
        assert_eq!(net.layer_specs(), loaded.layer_specs());
        for (a, b) in net.params().iter().zip(loaded.params()) {
            assert_eq!(a.data(), b.data());
            assert_eq!(a.shape(), b.shape());
        }
    }
}
