//! Append-only tape for reverse-mode automatic differentiation.
//!
//! Every primitive op pushes one node; topological order is insertion order,
//! and the backward pass walks the tape once in reverse. One tape per
//! training step / attack step; tapes are single-threaded (ops may use
//! data-parallel kernels internally), and independent tapes can live on
//! separate threads.

use std::cell::{Cell, Ref, RefCell};

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    index: usize,
}

/// Reduction applied by batched loss ops.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    /// y = x · wᵀ + b with x:[B,in], w:[out,in], b:[out].
    Linear { x: usize, w: usize, b: Option<usize> },
    Conv2d { x: usize, k: usize, b: Option<usize>, stride: usize, padding: usize },
    MaxPool2d { x: usize, argmax: Vec<usize> },
    AvgPool2d { x: usize, window: usize, stride: usize },
    Relu { x: usize },
    Sigmoid { x: usize },
    Abs { x: usize },
    Sqrt { x: usize },
    Ln { x: usize },
    /// y = x^e for x >= 0 (compose with Abs first for general inputs).
    Pow { x: usize, e: f64 },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    /// y = mul·x + add, with f64 constants.
    Affine { x: usize, mul: f64 },
    /// y = s·x with s a one-element tensor.
    MulScalar { s: usize, x: usize },
    Sum { x: usize },
    Select { x: usize, index: usize },
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<f64>, reduction: Reduction },
    Reshape { x: usize },
    Transpose { x: usize },
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        match *self {
            Op::Leaf => vec![],
            Op::Matmul { a, b } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } | Op::Div { a, b } => {
                vec![a, b]
            }
            Op::Linear { x, w, b } => {
                let mut p = vec![x, w];
                if let Some(b) = b {
                    p.push(b);
                }
                p
            }
            Op::Conv2d { x, k, b, .. } => {
                let mut p = vec![x, k];
                if let Some(b) = b {
                    p.push(b);
                }
                p
            }
            Op::MulScalar { s, x } => vec![s, x],
            Op::MaxPool2d { x, .. }
            | Op::AvgPool2d { x, .. }
            | Op::Relu { x }
            | Op::Sigmoid { x }
            | Op::Abs { x }
            | Op::Sqrt { x }
            | Op::Ln { x }
            | Op::Pow { x, .. }
            | Op::Affine { x, .. }
            | Op::Sum { x }
            | Op::Select { x, .. }
            | Op::Reshape { x }
            | Op::Transpose { x } => vec![x],
            Op::CrossEntropy { logits, .. } => vec![logits],
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Vec<f64>>,
    needs: bool,
}

/// Reverse-mode tape.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    backward_done: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            backward_done: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Insert a leaf value. Gradients are only accumulated for (and through)
    /// leaves with `requires_grad`.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    fn push(&self, op: Op, value: Tensor, needs: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            value,
            grad: None,
            needs,
        });
        Var {
            index: nodes.len() - 1,
        }
    }

    fn push_from(&self, op: Op, value: Tensor) -> Var {
        let needs = {
            let nodes = self.nodes.borrow();
            op.parents().iter().any(|&p| nodes[p].needs)
        };
        self.push(op, value, needs)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |nodes| &nodes[v.index].value)
    }

    pub fn value_cloned(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.index].value.clone()
    }

    pub fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.index].value.shape().to_vec()
    }

    /// Gradient accumulated for `v`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let nodes = self.nodes.borrow();
        let node = &nodes[v.index];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Drop all gradients so `backward` may run again.
    pub fn clear_grads(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
        self.backward_done.set(false);
    }

    // ── Forward ops ─────────────────────────────────────────────────────

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n);
        {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.index].value, &nodes[b.index].value);
            if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows() {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    lhs: ta.shape().to_vec(),
                    rhs: tb.shape().to_vec(),
                });
            }
            m = ta.rows();
            k = ta.cols();
            n = tb.cols();
        }
        let mut out = vec![0.0; m * n];
        {
            let nodes = self.nodes.borrow();
            kernels::matmul(
                nodes[a.index].value.data(),
                nodes[b.index].value.data(),
                &mut out,
                m,
                k,
                n,
            );
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push_from(Op::Matmul { a: a.index, b: b.index }, value))
    }

    /// Dense layer: x[B,in] · w[out,in]ᵀ + b[out].
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (bsz, fan_in, fan_out);
        {
            let nodes = self.nodes.borrow();
            let (tx, tw) = (&nodes[x.index].value, &nodes[w.index].value);
            if tx.rank() != 2 || tw.rank() != 2 || tx.cols() != tw.cols() {
                return Err(Error::ShapeMismatch {
                    op: "linear",
                    lhs: tx.shape().to_vec(),
                    rhs: tw.shape().to_vec(),
                });
            }
            bsz = tx.rows();
            fan_in = tx.cols();
            fan_out = tw.rows();
            if let Some(bv) = b {
                let tb = &nodes[bv.index].value;
                if tb.numel() != fan_out {
                    return Err(Error::ShapeMismatch {
                        op: "linear bias",
                        lhs: tb.shape().to_vec(),
                        rhs: vec![fan_out],
                    });
                }
            }
        }
        let mut out = vec![0.0; bsz * fan_out];
        {
            let nodes = self.nodes.borrow();
            if let Some(bv) = b {
                let bias = nodes[bv.index].value.data();
                for row in out.chunks_exact_mut(fan_out) {
                    row.copy_from_slice(bias);
                }
            }
            kernels::matmul_nt(
                nodes[x.index].value.data(),
                nodes[w.index].value.data(),
                &mut out,
                bsz,
                fan_in,
                fan_out,
            );
        }
        let value = Tensor::new(vec![bsz, fan_out], out)?;
        Ok(self.push_from(
            Op::Linear {
                x: x.index,
                w: w.index,
                b: b.map(|v| v.index),
            },
            value,
        ))
    }

    /// 2-D cross-correlation. Input [C,H,W] or [B,C,H,W]; kernel
    /// [k,k,C_in,C_out]; odd k, stride ≥ 1, zero padding.
    pub fn conv2d(&self, x: Var, k: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let bias = b.map(|bv| nodes[bv.index].value.data());
            conv2d_forward(
                &nodes[x.index].value,
                &nodes[k.index].value,
                bias,
                stride,
                padding,
            )?
        };
        Ok(self.push_from(
            Op::Conv2d {
                x: x.index,
                k: k.index,
                b: b.map(|v| v.index),
                stride,
                padding,
            },
            value,
        ))
    }

    pub fn maxpool2d(&self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let (value, argmax) = {
            let nodes = self.nodes.borrow();
            maxpool2d_forward(&nodes[x.index].value, window, stride)?
        };
        Ok(self.push_from(Op::MaxPool2d { x: x.index, argmax }, value))
    }

    pub fn avgpool2d(&self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            avgpool2d_forward(&nodes[x.index].value, window, stride)?
        };
        Ok(self.push_from(Op::AvgPool2d { x: x.index, window, stride }, value))
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[x.index].value.map(|v| v.max(0.0))
        };
        Ok(self.push_from(Op::Relu { x: x.index }, value))
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[x.index].value.map(|v| 1.0 / (1.0 + (-v).exp()))
        };
        Ok(self.push_from(Op::Sigmoid { x: x.index }, value))
    }

    pub fn abs(&self, x: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[x.index].value.map(f64::abs)
        };
        Ok(self.push_from(Op::Abs { x: x.index }, value))
    }

    pub fn sqrt(&self, x: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[x.index].value.map(f64::sqrt)
        };
        Ok(self.push_from(Op::Sqrt { x: x.index }, value))
    }

    pub fn ln(&self, x: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[x.index].value.map(f64::ln)
        };
        Ok(self.push_from(Op::Ln { x: x.index }, value))
    }

    /// x^e elementwise, for non-negative x.
    pub fn pow(&self, x: Var, e: f64) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[x.index].value.map(|v| v.powf(e))
        };
        Ok(self.push_from(Op::Pow { x: x.index, e }, value))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.index].value.add(&nodes[b.index].value)?
        };
        Ok(self.push_from(Op::Add { a: a.index, b: b.index }, value))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.index].value.sub(&nodes[b.index].value)?
        };
        Ok(self.push_from(Op::Sub { a: a.index, b: b.index }, value))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.index].value, &nodes[b.index].value);
            if ta.shape() != tb.shape() {
                return Err(Error::ShapeMismatch {
                    op: "mul",
                    lhs: ta.shape().to_vec(),
                    rhs: tb.shape().to_vec(),
                });
            }
            Tensor::new(
                ta.shape().to_vec(),
                ta.data().iter().zip(tb.data()).map(|(&p, &q)| p * q).collect(),
            )?
        };
        Ok(self.push_from(Op::Mul { a: a.index, b: b.index }, value))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.index].value, &nodes[b.index].value);
            if ta.shape() != tb.shape() {
                return Err(Error::ShapeMismatch {
                    op: "div",
                    lhs: ta.shape().to_vec(),
                    rhs: tb.shape().to_vec(),
                });
            }
            Tensor::new(
                ta.shape().to_vec(),
                ta.data().iter().zip(tb.data()).map(|(&p, &q)| p / q).collect(),
            )?
        };
        Ok(self.push_from(Op::Div { a: a.index, b: b.index }, value))
    }

    /// y = mul·x + add with constants.
    pub fn affine(&self, x: Var, mul: f64, add: f64) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[x.index].value.map(|v| mul * v + add)
        };
        Ok(self.push_from(Op::Affine { x: x.index, mul }, value))
    }

    pub fn scale(&self, x: Var, c: f64) -> Result<Var> {
        self.affine(x, c, 0.0)
    }

    /// Broadcast-multiply by a one-element tensor (trainable scalar).
    pub fn mul_scalar(&self, s: Var, x: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let ts = &nodes[s.index].value;
            if ts.numel() != 1 {
                return Err(Error::ShapeDataMismatch {
                    op: "mul_scalar",
                    shape: ts.shape().to_vec(),
                    expected: 1,
                    got: ts.numel(),
                });
            }
            let c = ts.data()[0];
            nodes[x.index].value.map(|v| c * v)
        };
        Ok(self.push_from(Op::MulScalar { s: s.index, x: x.index }, value))
    }

    /// Full reduction to a scalar.
    pub fn sum(&self, x: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            Tensor::scalar(nodes[x.index].value.data().iter().sum())
        };
        Ok(self.push_from(Op::Sum { x: x.index }, value))
    }

    /// Pick one element (by flat index) as a scalar.
    pub fn select(&self, x: Var, index: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.index].value;
            if index >= t.numel() {
                return Err(Error::InvalidArgument {
                    op: "select",
                    message: format!("index {index} out of {}", t.numel()),
                });
            }
            Tensor::scalar(t.data()[index])
        };
        Ok(self.push_from(Op::Select { x: x.index, index }, value))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[x.index].value.reshaped(shape)?
        };
        Ok(self.push_from(Op::Reshape { x: x.index }, value))
    }

    pub fn transpose(&self, x: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[x.index].value.transposed()?
        };
        Ok(self.push_from(Op::Transpose { x: x.index }, value))
    }

    /// Softmax cross-entropy, max-stabilized. `logits` is [P] or [B,P];
    /// one label per row. Returns a scalar (mean or sum over the batch).
    pub fn softmax_cross_entropy(&self, logits: Var, labels: &[usize], reduction: Reduction) -> Result<Var> {
        let (loss, probs) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[logits.index].value;
            let (bsz, classes) = match t.rank() {
                1 => (1, t.shape()[0]),
                2 => (t.rows(), t.cols()),
                r => {
                    return Err(Error::RankMismatch {
                        op: "softmax_cross_entropy",
                        expected: 2,
                        got: r,
                    })
                }
            };
            if labels.len() != bsz {
                return Err(Error::InvalidArgument {
                    op: "softmax_cross_entropy",
                    message: format!("{} labels for batch of {bsz}", labels.len()),
                });
            }
            let mut probs = vec![0.0; bsz * classes];
            let mut total = 0.0;
            for (r, &label) in labels.iter().enumerate() {
                if label >= classes {
                    return Err(Error::LabelOutOfRange { label, classes });
                }
                let row = &t.data()[r * classes..(r + 1) * classes];
                let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let mut z = 0.0;
                for (j, &v) in row.iter().enumerate() {
                    let e = (v - m).exp();
                    probs[r * classes + j] = e;
                    z += e;
                }
                for p in &mut probs[r * classes..(r + 1) * classes] {
                    *p /= z;
                }
                total += z.ln() + m - row[label];
            }
            if reduction == Reduction::Mean {
                total /= bsz as f64;
            }
            (Tensor::scalar(total), probs)
        };
        Ok(self.push_from(
            Op::CrossEntropy {
                logits: logits.index,
                labels: labels.to_vec(),
                probs,
                reduction,
            },
            loss,
        ))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Each node is visited exactly once;
    /// a second call without [`Tape::clear_grads`] is rejected.
    pub fn backward(&self, root: Var) -> Result<()> {
        if self.backward_done.get() {
            return Err(Error::BackwardAlreadyRun);
        }
        {
            let nodes = self.nodes.borrow();
            let rv = &nodes[root.index].value;
            if !rv.is_scalar() {
                return Err(Error::NonScalarRoot {
                    shape: rv.shape().to_vec(),
                });
            }
        }
        self.backward_done.set(true);
        let mut nodes = self.nodes.borrow_mut();
        nodes[root.index].grad = Some(vec![1.0]);
        for i in (0..=root.index).rev() {
            let Some(g) = nodes[i].grad.take() else {
                continue;
            };
            let op = nodes[i].op.clone();
            backprop_node(&mut nodes, i, &g, &op);
            nodes[i].grad = Some(g);
        }
        Ok(())
    }
}

/// Add `g`-weighted contributions of node `i` into its parents' grads.
fn backprop_node(nodes: &mut [Node], i: usize, g: &[f64], op: &Op) {
    match op {
        Op::Leaf => {}
        Op::Matmul { a, b } => {
            let (m, n) = {
                let v = &nodes[i].value;
                (v.rows(), v.cols())
            };
            let k = nodes[*a].value.cols();
            if nodes[*a].needs {
                with_grad(nodes, *a, |nodes, ga| {
                    kernels::matmul_nt(g, nodes[*b].value.data(), ga, m, n, k);
                });
            }
            if nodes[*b].needs {
                with_grad(nodes, *b, |nodes, gb| {
                    kernels::matmul_tn(nodes[*a].value.data(), g, gb, m, k, n);
                });
            }
        }
        Op::Linear { x, w, b } => {
            let (bsz, fan_out) = {
                let v = &nodes[i].value;
                (v.rows(), v.cols())
            };
            let fan_in = nodes[*x].value.cols();
            if nodes[*x].needs {
                with_grad(nodes, *x, |nodes, gx| {
                    kernels::matmul(g, nodes[*w].value.data(), gx, bsz, fan_out, fan_in);
                });
            }
            if nodes[*w].needs {
                with_grad(nodes, *w, |nodes, gw| {
                    kernels::matmul_tn(g, nodes[*x].value.data(), gw, bsz, fan_out, fan_in);
                });
            }
            if let Some(b) = b {
                if nodes[*b].needs {
                    with_grad(nodes, *b, |_, gb| {
                        for row in g.chunks_exact(fan_out) {
                            for (gb_j, &gj) in gb.iter_mut().zip(row) {
                                *gb_j += gj;
                            }
                        }
                    });
                }
            }
        }
        Op::Conv2d { x, k, b, stride, padding } => {
            conv2d_backward(nodes, i, g, *x, *k, *b, *stride, *padding);
        }
        Op::MaxPool2d { x, argmax } => {
            if nodes[*x].needs {
                with_grad(nodes, *x, |_, gx| {
                    for (o, &src) in argmax.iter().enumerate() {
                        gx[src] += g[o];
                    }
                });
            }
        }
        Op::AvgPool2d { x, window, stride } => {
            if nodes[*x].needs {
                let xshape = nodes[*x].value.shape().to_vec();
                let oshape = nodes[i].value.shape().to_vec();
                with_grad(nodes, *x, |_, gx| {
                    avgpool2d_backward(g, gx, &xshape, &oshape, *window, *stride);
                });
            }
        }
        Op::Relu { x } => {
            if nodes[*x].needs {
                with_grad(nodes, *x, |nodes, gx| {
                    // subgradient 0 at exactly 0
                    for ((gx_j, &gj), &v) in gx.iter_mut().zip(g).zip(nodes[*x].value.data()) {
                        if v > 0.0 {
                            *gx_j += gj;
                        }
                    }
                });
            }
        }
        Op::Sigmoid { x } => {
            if nodes[*x].needs {
                let y = nodes[i].value.data().to_vec();
                with_grad(nodes, *x, |_, gx| {
                    for ((gx_j, &gj), &yj) in gx.iter_mut().zip(g).zip(&y) {
                        *gx_j += gj * yj * (1.0 - yj);
                    }
                });
            }
        }
        Op::Abs { x } => {
            if nodes[*x].needs {
                with_grad(nodes, *x, |nodes, gx| {
                    for ((gx_j, &gj), &v) in gx.iter_mut().zip(g).zip(nodes[*x].value.data()) {
                        *gx_j += gj * if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 };
                    }
                });
            }
        }
        Op::Sqrt { x } => {
            if nodes[*x].needs {
                let y = nodes[i].value.data().to_vec();
                with_grad(nodes, *x, |_, gx| {
                    for ((gx_j, &gj), &yj) in gx.iter_mut().zip(g).zip(&y) {
                        *gx_j += gj / (2.0 * yj);
                    }
                });
            }
        }
        Op::Ln { x } => {
            if nodes[*x].needs {
                with_grad(nodes, *x, |nodes, gx| {
                    for ((gx_j, &gj), &v) in gx.iter_mut().zip(g).zip(nodes[*x].value.data()) {
                        *gx_j += gj / v;
                    }
                });
            }
        }
        Op::Pow { x, e } => {
            if nodes[*x].needs {
                let e = *e;
                with_grad(nodes, *x, |nodes, gx| {
                    for ((gx_j, &gj), &v) in gx.iter_mut().zip(g).zip(nodes[*x].value.data()) {
                        // subgradient 0 at v == 0
                        if v != 0.0 {
                            *gx_j += gj * e * v.powf(e - 1.0);
                        }
                    }
                });
            }
        }
        Op::Add { a, b } => {
            for p in [*a, *b] {
                if nodes[p].needs {
                    with_grad(nodes, p, |_, gp| {
                        for (gp_j, &gj) in gp.iter_mut().zip(g) {
                            *gp_j += gj;
                        }
                    });
                }
            }
        }
        Op::Sub { a, b } => {
            if nodes[*a].needs {
                with_grad(nodes, *a, |_, ga| {
                    for (ga_j, &gj) in ga.iter_mut().zip(g) {
                        *ga_j += gj;
                    }
                });
            }
            if nodes[*b].needs {
                with_grad(nodes, *b, |_, gb| {
                    for (gb_j, &gj) in gb.iter_mut().zip(g) {
                        *gb_j -= gj;
                    }
                });
            }
        }
        Op::Mul { a, b } => {
            if nodes[*a].needs {
                with_grad(nodes, *a, |nodes, ga| {
                    for ((ga_j, &gj), &bv) in ga.iter_mut().zip(g).zip(nodes[*b].value.data()) {
                        *ga_j += gj * bv;
                    }
                });
            }
            if nodes[*b].needs {
                with_grad(nodes, *b, |nodes, gb| {
                    for ((gb_j, &gj), &av) in gb.iter_mut().zip(g).zip(nodes[*a].value.data()) {
                        *gb_j += gj * av;
                    }
                });
            }
        }
        Op::Div { a, b } => {
            if nodes[*a].needs {
                with_grad(nodes, *a, |nodes, ga| {
                    for ((ga_j, &gj), &bv) in ga.iter_mut().zip(g).zip(nodes[*b].value.data()) {
                        *ga_j += gj / bv;
                    }
                });
            }
            if nodes[*b].needs {
                let y = nodes[i].value.data().to_vec(); // a/b
                with_grad(nodes, *b, |nodes, gb| {
                    for (((gb_j, &gj), &bv), &yj) in
                        gb.iter_mut().zip(g).zip(nodes[*b].value.data()).zip(&y)
                    {
                        *gb_j -= gj * yj / bv;
                    }
                });
            }
        }
        Op::Affine { x, mul } => {
            if nodes[*x].needs {
                with_grad(nodes, *x, |_, gx| {
                    for (gx_j, &gj) in gx.iter_mut().zip(g) {
                        *gx_j += mul * gj;
                    }
                });
            }
        }
        Op::MulScalar { s, x } => {
            if nodes[*s].needs {
                with_grad(nodes, *s, |nodes, gs| {
                    let mut acc = 0.0;
                    for (&gj, &xv) in g.iter().zip(nodes[*x].value.data()) {
                        acc += gj * xv;
                    }
                    gs[0] += acc;
                });
            }
            if nodes[*x].needs {
                let sv = nodes[*s].value.data()[0];
                with_grad(nodes, *x, |_, gx| {
                    for (gx_j, &gj) in gx.iter_mut().zip(g) {
                        *gx_j += sv * gj;
                    }
                });
            }
        }
        Op::Sum { x } => {
            if nodes[*x].needs {
                with_grad(nodes, *x, |_, gx| {
                    for gx_j in gx.iter_mut() {
                        *gx_j += g[0];
                    }
                });
            }
        }
        Op::Select { x, index } => {
            if nodes[*x].needs {
                with_grad(nodes, *x, |_, gx| {
                    gx[*index] += g[0];
                });
            }
        }
        Op::CrossEntropy { logits, labels, probs, reduction } => {
            if nodes[*logits].needs {
                let classes = probs.len() / labels.len();
                let scale = match reduction {
                    Reduction::Mean => g[0] / labels.len() as f64,
                    Reduction::Sum => g[0],
                };
                with_grad(nodes, *logits, |_, gl| {
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..classes {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            gl[r * classes + j] += scale * (probs[r * classes + j] - onehot);
                        }
                    }
                });
            }
        }
        Op::Reshape { x } => {
            if nodes[*x].needs {
                with_grad(nodes, *x, |_, gx| {
                    for (gx_j, &gj) in gx.iter_mut().zip(g) {
                        *gx_j += gj;
                    }
                });
            }
        }
        Op::Transpose { x } => {
            if nodes[*x].needs {
                let (r, c) = {
                    let v = &nodes[i].value;
                    (v.rows(), v.cols())
                };
                with_grad(nodes, *x, |_, gx| {
                    for p in 0..r {
                        for q in 0..c {
                            gx[q * r + p] += g[p * c + q];
                        }
                    }
                });
            }
        }
    }
}

/// Take a parent's grad buffer out (allocating zeros on first touch), hand it
/// to `f` together with the node arena, and put it back. Keeping the buffer
/// owned sidesteps aliasing between the buffer and read-only value lookups.
fn with_grad(nodes: &mut [Node], target: usize, f: impl FnOnce(&mut [Node], &mut [f64])) {
    let mut buf = nodes[target]
        .grad
        .take()
        .unwrap_or_else(|| vec![0.0; nodes[target].value.numel()]);
    f(nodes, &mut buf);
    nodes[target].grad = Some(buf);
}

// ── Spatial op implementations ──────────────────────────────────────────

fn spatial_dims(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize, usize, bool)> {
    match shape.len() {
        3 => Ok((1, shape[0], shape[1], shape[2], false)),
        4 => Ok((shape[0], shape[1], shape[2], shape[3], true)),
        r => Err(Error::RankMismatch { op, expected: 3, got: r }),
    }
}

pub(crate) fn conv2d_forward(
    x: &Tensor,
    kernel: &Tensor,
    bias: Option<&[f64]>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (bsz, c_in, h, w, batched) = spatial_dims(x.shape(), "conv2d")?;
    if kernel.rank() != 4 {
        return Err(Error::RankMismatch {
            op: "conv2d kernel",
            expected: 4,
            got: kernel.rank(),
        });
    }
    let ks = kernel.shape()[0];
    let c_out = kernel.shape()[3];
    if kernel.shape()[1] != ks || kernel.shape()[2] != c_in {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: kernel.shape().to_vec(),
        });
    }
    if ks % 2 == 0 {
        return Err(Error::InvalidArgument {
            op: "conv2d",
            message: format!("kernel size {ks} must be odd"),
        });
    }
    if stride == 0 {
        return Err(Error::InvalidArgument {
            op: "conv2d",
            message: "stride must be >= 1".into(),
        });
    }
    if h + 2 * padding < ks || w + 2 * padding < ks {
        return Err(Error::KernelTooLarge {
            kernel: ks,
            padded: h + 2 * padding,
        });
    }
    if let Some(b) = bias {
        if b.len() != c_out {
            return Err(Error::ShapeDataMismatch {
                op: "conv2d bias",
                shape: vec![c_out],
                expected: c_out,
                got: b.len(),
            });
        }
    }
    let oh = (h + 2 * padding - ks) / stride + 1;
    let ow = (w + 2 * padding - ks) / stride + 1;
    let mut out = vec![0.0; bsz * c_out * oh * ow];
    let kd = kernel.data();
    let xd = x.data();
    let run_example = |b: usize, obuf: &mut [f64]| {
        let xex = &xd[b * c_in * h * w..(b + 1) * c_in * h * w];
        let mut acc = vec![0.0; c_out];
        for r in 0..oh {
            for q in 0..ow {
                match bias {
                    Some(bv) => acc.copy_from_slice(bv),
                    None => acc.iter_mut().for_each(|a| *a = 0.0),
                }
                for kr in 0..ks {
                    let ih = (r * stride + kr) as isize - padding as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for kq in 0..ks {
                        let iw = (q * stride + kq) as isize - padding as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        for ci in 0..c_in {
                            let xv = xex[(ci * h + ih as usize) * w + iw as usize];
                            let kbase = ((kr * ks + kq) * c_in + ci) * c_out;
                            let krow = &kd[kbase..kbase + c_out];
                            for (a, &kv) in acc.iter_mut().zip(krow) {
                                *a = xv.mul_add(kv, *a);
                            }
                        }
                    }
                }
                for co in 0..c_out {
                    obuf[(co * oh + r) * ow + q] = acc[co];
                }
            }
        }
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if bsz > 1 {
            out.par_chunks_mut(c_out * oh * ow)
                .enumerate()
                .for_each(|(b, obuf)| run_example(b, obuf));
        } else {
            run_example(0, &mut out);
        }
    }
    #[cfg(not(feature = "parallel"))]
    for b in 0..bsz {
        run_example(b, &mut out[b * c_out * oh * ow..(b + 1) * c_out * oh * ow]);
    }
    let shape = if batched {
        vec![bsz, c_out, oh, ow]
    } else {
        vec![c_out, oh, ow]
    };
    Tensor::new(shape, out)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    nodes: &mut [Node],
    i: usize,
    g: &[f64],
    x: usize,
    k: usize,
    b: Option<usize>,
    stride: usize,
    padding: usize,
) {
    let (bsz, c_in, h, w, _) = spatial_dims(nodes[x].value.shape(), "conv2d").unwrap();
    let ks = nodes[k].value.shape()[0];
    let c_out = nodes[k].value.shape()[3];
    let (oh, ow) = {
        let os = nodes[i].value.shape();
        (os[os.len() - 2], os[os.len() - 1])
    };
    // gather g[b,:,r,q] into a contiguous [c_out] slab per output position
    let mut gtmp = vec![0.0; c_out];
    if nodes[k].needs {
        with_grad(nodes, k, |nodes, gk| {
            let xd = nodes[x].value.data();
            for bi in 0..bsz {
                let xex = &xd[bi * c_in * h * w..(bi + 1) * c_in * h * w];
                let gex = &g[bi * c_out * oh * ow..(bi + 1) * c_out * oh * ow];
                for r in 0..oh {
                    for q in 0..ow {
                        for (co, gt) in gtmp.iter_mut().enumerate() {
                            *gt = gex[(co * oh + r) * ow + q];
                        }
                        for kr in 0..ks {
                            let ih = (r * stride + kr) as isize - padding as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for kq in 0..ks {
                                let iw = (q * stride + kq) as isize - padding as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                for ci in 0..c_in {
                                    let xv = xex[(ci * h + ih as usize) * w + iw as usize];
                                    let kbase = ((kr * ks + kq) * c_in + ci) * c_out;
                                    for (gk_v, &gt) in gk[kbase..kbase + c_out].iter_mut().zip(&gtmp) {
                                        *gk_v = xv.mul_add(gt, *gk_v);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    }
    if nodes[x].needs {
        with_grad(nodes, x, |nodes, gx| {
            let kd = nodes[k].value.data();
            for bi in 0..bsz {
                let gxex = &mut gx[bi * c_in * h * w..(bi + 1) * c_in * h * w];
                let gex = &g[bi * c_out * oh * ow..(bi + 1) * c_out * oh * ow];
                for r in 0..oh {
                    for q in 0..ow {
                        for (co, gt) in gtmp.iter_mut().enumerate() {
                            *gt = gex[(co * oh + r) * ow + q];
                        }
                        for kr in 0..ks {
                            let ih = (r * stride + kr) as isize - padding as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for kq in 0..ks {
                                let iw = (q * stride + kq) as isize - padding as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                for ci in 0..c_in {
                                    let kbase = ((kr * ks + kq) * c_in + ci) * c_out;
                                    let s = kernels::dot(&kd[kbase..kbase + c_out], &gtmp);
                                    gxex[(ci * h + ih as usize) * w + iw as usize] += s;
                                }
                            }
                        }
                    }
                }
            }
        });
    }
    if let Some(b) = b {
        if nodes[b].needs {
            with_grad(nodes, b, |_, gb| {
                for bi in 0..bsz {
                    let gex = &g[bi * c_out * oh * ow..(bi + 1) * c_out * oh * ow];
                    for (co, gb_v) in gb.iter_mut().enumerate() {
                        let plane = &gex[co * oh * ow..(co + 1) * oh * ow];
                        *gb_v += plane.iter().sum::<f64>();
                    }
                }
            });
        }
    }
}

pub(crate) fn maxpool2d_forward(x: &Tensor, window: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let (bsz, c, h, w, batched) = spatial_dims(x.shape(), "maxpool2d")?;
    if window == 0 || stride == 0 {
        return Err(Error::InvalidArgument {
            op: "maxpool2d",
            message: "window and stride must be >= 1".into(),
        });
    }
    if h < window || w < window {
        return Err(Error::KernelTooLarge { kernel: window, padded: h.min(w) });
    }
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let xd = x.data();
    let mut out = vec![0.0; bsz * c * oh * ow];
    let mut argmax = vec![0usize; out.len()];
    for bc in 0..bsz * c {
        let plane = &xd[bc * h * w..(bc + 1) * h * w];
        for r in 0..oh {
            for q in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                // strict > keeps the first (lowest row-major) index on ties
                for kr in 0..window {
                    for kq in 0..window {
                        let idx = (r * stride + kr) * w + q * stride + kq;
                        if plane[idx] > best {
                            best = plane[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = bc * oh * ow + r * ow + q;
                out[o] = best;
                argmax[o] = bc * h * w + best_idx;
            }
        }
    }
    let shape = if batched {
        vec![bsz, c, oh, ow]
    } else {
        vec![c, oh, ow]
    };
    Ok((Tensor::new(shape, out)?, argmax))
}

pub(crate) fn avgpool2d_forward(x: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    let (bsz, c, h, w, batched) = spatial_dims(x.shape(), "avgpool2d")?;
    if window == 0 || stride == 0 {
        return Err(Error::InvalidArgument {
            op: "avgpool2d",
            message: "window and stride must be >= 1".into(),
        });
    }
    if h < window || w < window {
        return Err(Error::KernelTooLarge { kernel: window, padded: h.min(w) });
    }
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let inv = 1.0 / (window * window) as f64;
    let xd = x.data();
    let mut out = vec![0.0; bsz * c * oh * ow];
    for bc in 0..bsz * c {
        let plane = &xd[bc * h * w..(bc + 1) * h * w];
        for r in 0..oh {
            for q in 0..ow {
                let mut s = 0.0;
                for kr in 0..window {
                    for kq in 0..window {
                        s += plane[(r * stride + kr) * w + q * stride + kq];
                    }
                }
                out[bc * oh * ow + r * ow + q] = s * inv;
            }
        }
    }
    let shape = if batched {
        vec![bsz, c, oh, ow]
    } else {
        vec![c, oh, ow]
    };
    Tensor::new(shape, out)
}

fn avgpool2d_backward(g: &[f64], gx: &mut [f64], xshape: &[usize], oshape: &[usize], window: usize, stride: usize) {
    let (bsz, c, h, w, _) = spatial_dims(xshape, "avgpool2d").unwrap();
    let (oh, ow) = (oshape[oshape.len() - 2], oshape[oshape.len() - 1]);
    let inv = 1.0 / (window * window) as f64;
    for bc in 0..bsz * c {
        let gplane = &g[bc * oh * ow..(bc + 1) * oh * ow];
        let xplane = &mut gx[bc * h * w..(bc + 1) * h * w];
        for r in 0..oh {
            for q in 0..ow {
                let gv = gplane[r * ow + q] * inv;
                for kr in 0..window {
                    for kq in 0..window {
                        xplane[(r * stride + kr) * w + q * stride + kq] += gv;
                    }
                }
            }
        }
    }
}
