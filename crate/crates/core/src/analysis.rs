//! Input-gradient computation and the product-norm machinery around it:
//! the per-logit upper bound for ReLU chains, the residual-chain bound with
//! its 2^L expansion, and gradient-norm histograms over datasets.

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{dense_forward, Layer, Network, ResidualBlock, Shortcut};
use crate::oracles;
use crate::tape::{Reduction, Tape};
use crate::tensor::Tensor;

/// What to differentiate with respect to the input.
#[derive(Clone, Copy, Debug)]
pub enum GradTarget {
    /// One logit ŷ_j.
    Logit(usize),
    /// Cross-entropy loss against a label.
    CeLoss { label: usize },
}

/// Exact input gradient via reverse mode; `x` has the network input shape.
pub fn input_gradient(net: &Network, x: &Tensor, target: GradTarget) -> Result<Tensor> {
    let tape = Tape::new();
    let params = net.stage_params(&tape, false);
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    let xv = tape.leaf(x.reshaped(&shape)?, true);
    let logits = net.trace(&tape, &params, xv)?;
    let root = match target {
        GradTarget::Logit(j) => {
            let classes = tape.shape_of(logits)[1];
            if j >= classes {
                return Err(Error::LabelOutOfRange { label: j, classes });
            }
            tape.select(logits, j)?
        }
        GradTarget::CeLoss { label } => tape.softmax_cross_entropy(logits, &[label], Reduction::Sum)?,
    };
    tape.backward(root)?;
    let g = tape.grad(xv).expect("input requires grad");
    g.reshaped(x.shape())
}

/// Dense/ReLU chain view of a network: hidden weight matrices (with their
/// biases) and the linear head.
struct MlpView<'a> {
    hidden: Vec<(&'a Tensor, Option<&'a Tensor>)>,
    head: &'a Tensor,
}

fn mlp_view<'a>(net: &'a Network, op: &'static str) -> Result<MlpView<'a>> {
    let mut dense: Vec<(&Tensor, Option<&Tensor>)> = Vec::new();
    let mut expecting_dense = true;
    for layer in net.layers() {
        match (layer, expecting_dense) {
            (Layer::Dense { w, bias }, true) => {
                dense.push((w, bias.as_ref()));
                expecting_dense = false;
            }
            (Layer::Relu, false) => {
                expecting_dense = true;
            }
            _ => return Err(Error::NotAnMlp { op }),
        }
    }
    if expecting_dense || dense.is_empty() {
        // trailing relu or empty network
        return Err(Error::NotAnMlp { op });
    }
    let head = dense.pop().unwrap().0;
    Ok(MlpView { hidden: dense, head })
}

/// Input gradient of one logit through the explicit diagonal-gate product
/// prod_l (W_lᵀ J_l) w_{head,j}; must agree with reverse mode on dense/ReLU
/// chains.
pub fn input_gradient_logit_explicit(net: &Network, x: &Tensor, j: usize) -> Result<Tensor> {
    let view = mlp_view(net, "input_gradient_logit_explicit")?;
    if j >= view.head.rows() {
        return Err(Error::LabelOutOfRange {
            label: j,
            classes: view.head.rows(),
        });
    }
    // forward pass, recording the ReLU gates of every hidden layer
    let mut h = x.reshaped(&[1, x.numel()])?;
    let mut gates: Vec<Vec<f64>> = Vec::with_capacity(view.hidden.len());
    for (w, b) in &view.hidden {
        let z = dense_forward(&h, w, *b)?;
        gates.push(z.data().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect());
        h = z.map(|v| v.max(0.0));
    }
    // back-substitute v <- W_lᵀ (J_l ⊙ v) from the head row
    let mut v: Vec<f64> = view.head.row(j).to_vec();
    for (l, (w, _)) in view.hidden.iter().enumerate().rev() {
        let gated: Vec<f64> = v.iter().zip(&gates[l]).map(|(&vi, &gi)| vi * gi).collect();
        let mut next = vec![0.0; w.cols()];
        for (i, &gv) in gated.iter().enumerate() {
            if gv != 0.0 {
                for (n, &wv) in next.iter_mut().zip(w.row(i)) {
                    *n += gv * wv;
                }
            }
        }
        v = next;
    }
    Tensor::new(x.shape().to_vec(), v)
}

/// Assemble the cross-entropy input gradient from per-logit gradients:
/// sum_j (p_j - 1[j = label]) ∂ŷ_j/∂x. Independent route for checking the
/// direct reverse-mode CE gradient.
pub fn input_gradient_ce_assembled(net: &Network, x: &Tensor, label: usize) -> Result<Tensor> {
    let logits = net.forward(x)?;
    let m = logits.data().iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = logits.data().iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    let mut acc = Tensor::zeros(x.shape());
    for j in 0..logits.numel() {
        let coef = exps[j] / z - if j == label { 1.0 } else { 0.0 };
        let gj = input_gradient(net, x, GradTarget::Logit(j))?;
        for (a, &g) in acc.data_mut().iter_mut().zip(gj.data()) {
            *a += coef * g;
        }
    }
    Ok(acc)
}

/// Product-norm upper bound on ||∂ŷ_j/∂x||₂ for dense/ReLU chains:
/// C · prod_l ||W_l||_F · ||w_{head,j}||₂ with C = prod_l H_l from the
/// per-layer gate bound (`tight` uses sqrt(H_l) instead).
pub fn gradient_bound(net: &Network, j: usize, tight: bool) -> Result<f64> {
    let view = mlp_view(net, "gradient_bound")?;
    if j >= view.head.rows() {
        return Err(Error::LabelOutOfRange {
            label: j,
            classes: view.head.rows(),
        });
    }
    let mut bound = 1.0;
    for (w, _) in &view.hidden {
        let h = w.rows() as f64;
        bound *= if tight { h.sqrt() } else { h };
        bound *= w.frobenius();
    }
    let head_row: f64 = view.head.row(j).iter().map(|&v| v * v).sum::<f64>().sqrt();
    Ok(bound * head_row)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundMode {
    /// Use the chain's aggregation scalars (alpha + beta = 1 per block).
    ConvexAggregation,
    /// Standard residual sum: alpha = beta = 1 for every block.
    Standard,
}

pub const MAX_EXPANSION_DEPTH: usize = 12;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResidualBoundReport {
    pub depth: usize,
    pub mode: BoundMode,
    /// Frobenius norm of R_L = prod_l (alpha_l I + beta_l D_l).
    pub r_l_norm: f64,
    /// Max Frobenius norm over all 2^L subset products of the D_l.
    pub sigma_bound: f64,
    pub expansion_terms: usize,
    /// prod_l (alpha_l + beta_l): 1 for convex aggregation, 2^L standard.
    pub coefficient_sum: f64,
    pub ca_bound: f64,
    pub standard_bound: f64,
    /// Largest elementwise gap between R_L and its 2^L-term expansion.
    pub expansion_max_abs_diff: f64,
    pub bound_satisfied: bool,
}

struct ChainGates {
    alphas: Vec<f64>,
    betas: Vec<f64>,
    d_mats: Vec<Tensor>,
}

/// Walk a residual chain at input `x`, collecting per identity block the
/// aggregation scalars and the gated branch matrix
/// D_l = J_l^(1) W_l^(1)ᵀ J_l^(2) W_l^(2)ᵀ evaluated at the point.
fn chain_gates(net: &Network, x: &Tensor, mode: BoundMode) -> Result<ChainGates> {
    let mut h = x.reshaped(&[1, x.numel()])?;
    let mut alphas = Vec::new();
    let mut betas = Vec::new();
    let mut d_mats = Vec::new();
    for layer in net.layers() {
        match layer {
            Layer::Residual(block) => {
                if matches!(block.shortcut, Shortcut::Identity) {
                    let (a, b) = match mode {
                        BoundMode::ConvexAggregation => block.agg.weights(),
                        BoundMode::Standard => (1.0, 1.0),
                    };
                    alphas.push(a);
                    betas.push(b);
                    d_mats.push(gated_branch_matrix(block, &h)?);
                }
                h = eval_residual(block, &h, mode)?;
            }
            Layer::Relu => h = h.map(|v| v.max(0.0)),
            Layer::Dense { w, bias } => h = dense_forward(&h, w, bias.as_ref())?,
            other => {
                return Err(Error::UnsupportedLayer {
                    op: "residual_bound_check",
                    kind: other.kind_name(),
                })
            }
        }
    }
    Ok(ChainGates { alphas, betas, d_mats })
}

fn eval_residual(block: &ResidualBlock, h: &Tensor, mode: BoundMode) -> Result<Tensor> {
    let branch_in = if block.pre_activation { h.map(|v| v.max(0.0)) } else { h.clone() };
    let a1 = dense_forward(&branch_in, &block.w1, block.b1.as_ref())?.map(|v| v.max(0.0));
    let branch = dense_forward(&a1, &block.w2, block.b2.as_ref())?;
    let sc = match &block.shortcut {
        Shortcut::Identity => h.clone(),
        Shortcut::Project { w3 } => dense_forward(h, w3, None)?,
    };
    let (alpha, beta) = match mode {
        BoundMode::ConvexAggregation => block.agg.weights(),
        BoundMode::Standard => (1.0, 1.0),
    };
    sc.scale(alpha).add(&branch.scale(beta))
}

fn gated_branch_matrix(block: &ResidualBlock, h: &Tensor) -> Result<Tensor> {
    let dim = block.w1.cols();
    let hidden = block.w1.rows();
    // gates at the evaluation point
    let g1: Vec<f64> = h.data().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
    let pre = h.map(|v| v.max(0.0));
    let z1 = dense_forward(&pre, &block.w1, block.b1.as_ref())?;
    let g2: Vec<f64> = z1.data().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
    // M = W1ᵀ·diag(g2)  (dim × hidden)
    let mut m = vec![0.0; dim * hidden];
    for i in 0..hidden {
        for d in 0..dim {
            m[d * hidden + i] = block.w1.at(i, d) * g2[i];
        }
    }
    // D = diag(g1)·M·W2ᵀ
    let mt = Tensor::new(vec![dim, hidden], m)?;
    let mut d_mat = vec![0.0; dim * dim];
    crate::kernels::matmul_nt_seq(mt.data(), block.w2.data(), &mut d_mat, dim, hidden, dim);
    for (row, &g) in d_mat.chunks_exact_mut(dim).zip(&g1) {
        if g == 0.0 {
            row.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Tensor::new(vec![dim, dim], d_mat)
}

/// Compute R_L directly and via its full subset expansion; check the two
/// agree and that the norm respects the aggregation bound.
pub fn residual_bound_check(net: &Network, x: &Tensor, mode: BoundMode) -> Result<ResidualBoundReport> {
    let gates = chain_gates(net, x, mode)?;
    let depth = gates.d_mats.len();
    if depth > MAX_EXPANSION_DEPTH {
        return Err(Error::ResidualDepthTooLarge {
            depth,
            max: MAX_EXPANSION_DEPTH,
        });
    }
    let dim = if depth == 0 { 1 } else { gates.d_mats[0].rows() };
    // direct product
    let mut direct = Tensor::eye(dim);
    for ((&a, &b), d) in gates.alphas.iter().zip(&gates.betas).zip(&gates.d_mats) {
        let factor = Tensor::eye(dim).scale(a).add(&d.scale(b))?;
        direct = direct.matmul(&factor)?;
    }
    // 2^L expansion
    let (expanded, terms) = oracles::residual_expansion(&gates.alphas, &gates.betas, &gates.d_mats);
    let expansion_max_abs_diff = direct.max_abs_diff(&expanded);
    let sigma = terms.iter().map(|&(_, n)| n).fold(0.0, f64::max);
    let coefficient_sum: f64 = gates
        .alphas
        .iter()
        .zip(&gates.betas)
        .map(|(&a, &b)| a + b)
        .product();
    let r_l_norm = direct.frobenius();
    let ca_bound = coefficient_sum * sigma;
    let standard_bound = (1u64 << depth) as f64 * sigma;
    let bound = match mode {
        BoundMode::ConvexAggregation => ca_bound,
        BoundMode::Standard => standard_bound,
    };
    Ok(ResidualBoundReport {
        depth,
        mode,
        r_l_norm,
        sigma_bound: sigma,
        expansion_terms: 1usize << depth,
        coefficient_sum,
        ca_bound,
        standard_bound,
        expansion_max_abs_diff,
        bound_satisfied: r_l_norm <= bound + 1e-9,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn build(values: &[f64], bins: usize) -> Histogram {
        let bins = bins.max(1);
        let max = values.iter().fold(0.0f64, |a, &b| a.max(b));
        let hi = if max > 0.0 { max } else { 1.0 };
        let mut counts = vec![0usize; bins];
        for &v in values {
            let idx = ((v / hi) * bins as f64) as usize;
            counts[idx.min(bins - 1)] += 1;
        }
        let edges = (0..=bins).map(|i| hi * i as f64 / bins as f64).collect();
        Histogram { edges, counts }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count\n");
        for (i, &c) in self.counts.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", self.edges[i], self.edges[i + 1], c));
        }
        out
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradNormReport {
    /// Per-example l2 norm of the cross-entropy input gradient.
    pub norms: Vec<f64>,
    /// Per-logit product-norm bounds (dense/ReLU chains only).
    pub logit_bounds: Option<Vec<f64>>,
    pub histogram: Histogram,
}

impl GradNormReport {
    /// Fraction of norms strictly above `threshold`.
    pub fn tail_mass_above(&self, threshold: f64) -> f64 {
        if self.norms.is_empty() {
            return 0.0;
        }
        self.norms.iter().filter(|&&v| v > threshold).count() as f64 / self.norms.len() as f64
    }

    /// q-th quantile (0..=1) of the norms.
    pub fn quantile(&self, q: f64) -> f64 {
        let mut sorted = self.norms.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if sorted.is_empty() {
            return 0.0;
        }
        let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
        sorted[idx]
    }
}

/// Per-example ||∇_x L_ce||₂ over a dataset, binned. Examples are
/// independent, so the map runs data-parallel; the collection order is the
/// dataset order either way.
pub fn grad_norm_histogram(net: &Network, ds: &crate::data::Dataset, bins: usize) -> Result<GradNormReport> {
    let compute = |i: usize| -> Result<f64> {
        let (x, label) = ds.example(i);
        let g = input_gradient(net, &x, GradTarget::CeLoss { label })?;
        Ok(g.frobenius())
    };
    #[cfg(feature = "parallel")]
    let norms: Vec<f64> = (0..ds.len())
        .into_par_iter()
        .map(compute)
        .collect::<Result<Vec<_>>>()?;
    #[cfg(not(feature = "parallel"))]
    let norms: Vec<f64> = (0..ds.len()).map(compute).collect::<Result<Vec<_>>>()?;

    let logit_bounds = match mlp_view(net, "grad_norm_histogram") {
        Ok(view) => {
            let classes = view.head.rows();
            Some(
                (0..classes)
                    .map(|j| gradient_bound(net, j, false))
                    .collect::<Result<Vec<_>>>()?,
            )
        }
        Err(_) => None,
    };
    let histogram = Histogram::build(&norms, bins);
    Ok(GradNormReport {
        norms,
        logit_bounds,
        histogram,
    })
}


#[cfg(test)]
impl GradNormReport {
    fn counts_total(&self) -> usize {
        self.histogram.counts.iter().sum()
    }
}
