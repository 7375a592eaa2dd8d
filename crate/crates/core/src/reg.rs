//! Regularizers: weight decay, the L_{p,q}^q family (minimizable to
//! ineffectiveness by scale shifts), and the shift-invariant WEISSI family
//! combining a weight-energy product with a per-layer complexity term.
//!
//! Values operate on a network's regularized weights (biases and
//! aggregation logits never count). Analytic gradients are the training
//! path; `reg_on_tape` builds the same expressions through autodiff so
//! tests can pit the two against each other.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Network, WeightKind};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Matrix view of a weight tensor: dense matrices pass through; a conv
/// kernel [k,k,C_in,C_out] becomes [C_out, k·k·C_in] with one filter per
/// row.
pub fn weight_matrix(t: &Tensor, kind: WeightKind) -> Tensor {
    match kind {
        WeightKind::Dense => t.clone(),
        WeightKind::Conv => {
            let s = t.shape();
            let (k, c_in, c_out) = (s[0], s[2], s[3]);
            let cols = k * k * c_in;
            let mut m = vec![0.0; c_out * cols];
            for kr in 0..k {
                for kq in 0..k {
                    for ci in 0..c_in {
                        let col = (kr * k + kq) * c_in + ci;
                        let base = ((kr * k + kq) * c_in + ci) * c_out;
                        for co in 0..c_out {
                            m[co * cols + col] = t.data()[base + co];
                        }
                    }
                }
            }
            Tensor::new(vec![c_out, cols], m).expect("view shape")
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegKind {
    None,
    Wd,
    Lpq,
    Weissi,
    WeissiLog,
    WeissiCnn,
}

/// Which regularizer to apply and with which coefficients. `lambda_wd`
/// weights the wd/lpq kinds; `lambda_e`/`lambda_c` weight the WEISSI
/// energy and complexity terms.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RegularizerConfig {
    pub kind: RegKind,
    #[serde(default)]
    pub lambda_wd: f64,
    #[serde(default)]
    pub lambda_e: f64,
    #[serde(default)]
    pub lambda_c: f64,
    #[serde(default = "default_p")]
    pub p: f64,
    #[serde(default = "default_p")]
    pub q: f64,
}

fn default_p() -> f64 {
    2.0
}

impl RegularizerConfig {
    pub fn none() -> Self {
        RegularizerConfig {
            kind: RegKind::None,
            lambda_wd: 0.0,
            lambda_e: 0.0,
            lambda_c: 0.0,
            p: 2.0,
            q: 2.0,
        }
    }

    pub fn wd(lambda_wd: f64) -> Self {
        RegularizerConfig {
            kind: RegKind::Wd,
            lambda_wd,
            ..Self::none()
        }
    }

    pub fn lpq(p: f64, q: f64, lambda_wd: f64) -> Self {
        RegularizerConfig {
            kind: RegKind::Lpq,
            lambda_wd,
            p,
            q,
            ..Self::none()
        }
    }

    pub fn weissi(lambda_e: f64, lambda_c: f64) -> Self {
        RegularizerConfig {
            kind: RegKind::Weissi,
            lambda_e,
            lambda_c,
            ..Self::none()
        }
    }

    pub fn weissi_log(lambda_e: f64, lambda_c: f64) -> Self {
        RegularizerConfig {
            kind: RegKind::WeissiLog,
            lambda_e,
            lambda_c,
            ..Self::none()
        }
    }

    pub fn weissi_cnn(lambda_e: f64, lambda_c: f64) -> Self {
        RegularizerConfig {
            kind: RegKind::WeissiCnn,
            lambda_e,
            lambda_c,
            ..Self::none()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = |field: &'static str, v: f64| -> Result<()> {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::ConfigInvalid {
                    field,
                    message: format!("must be finite and >= 0, got {v}"),
                });
            }
            Ok(())
        };
        nonneg("reg.lambda_wd", self.lambda_wd)?;
        nonneg("reg.lambda_e", self.lambda_e)?;
        nonneg("reg.lambda_c", self.lambda_c)?;
        if self.kind == RegKind::Lpq && (self.p < 1.0 || self.q < 1.0) {
            return Err(Error::ConfigInvalid {
                field: "reg.p/q",
                message: format!("lpq requires p, q >= 1, got ({}, {})", self.p, self.q),
            });
        }
        Ok(())
    }
}

/// Evaluated regularizer: the λ-weighted total plus its raw components.
/// For the WEISSI kinds, total == lambda_e·energy + lambda_c·complexity.
/// For wd/lpq the raw value is reported as the energy component.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct RegValue {
    pub total: f64,
    pub energy_term: f64,
    pub complexity_term: f64,
}

/// Sum of squared Frobenius norms over all weight layers (raw, unweighted).
pub fn wd(net: &Network) -> f64 {
    net.weights().iter().map(|w| w.tensor.frobenius_sq()).sum()
}

/// Sum over layers of ||W_l||_{p,q}^q (raw). Satisfies the ineffective
/// family conditions with homogeneity exponent q.
pub fn lpq_family(net: &Network, p: f64, q: f64) -> Result<f64> {
    if p < 1.0 || q < 1.0 {
        return Err(Error::ConfigInvalid {
            field: "reg.p/q",
            message: format!("lpq requires p, q >= 1, got ({p}, {q})"),
        });
    }
    let mut acc = 0.0;
    for w in net.weights() {
        acc += weight_matrix(w.tensor, w.kind).lpq_norm_q(p, q)?;
    }
    Ok(acc)
}

fn frob_norms(net: &Network) -> Result<Vec<f64>> {
    let norms: Vec<f64> = net.weights().iter().map(|w| w.tensor.frobenius()).collect();
    for (i, &n) in norms.iter().enumerate() {
        if !(n > 0.0) {
            return Err(Error::ZeroNormLayer { index: i });
        }
    }
    Ok(norms)
}

fn complexity_sum(net: &Network, norms: &[f64]) -> f64 {
    net.weights()
        .iter()
        .zip(norms)
        .map(|(w, &n)| w.tensor.l1_norm() / n)
        .sum()
}

/// WEISSI: energy = prod_l ||W_l||_F², complexity = sum_l ||W_l/||W_l||_F||_1.
/// Both terms are invariant to any valid scale shift.
pub fn weissi(net: &Network, lambda_e: f64, lambda_c: f64) -> Result<RegValue> {
    let norms = frob_norms(net)?;
    let energy: f64 = norms.iter().map(|&n| n * n).product();
    let complexity = complexity_sum(net, &norms);
    Ok(RegValue {
        total: lambda_e * energy + lambda_c * complexity,
        energy_term: energy,
        complexity_term: complexity,
    })
}

/// Log variant: energy = sum_l log ||W_l||_F² (the log of the product),
/// finite where the raw product explodes with depth.
pub fn weissi_log(net: &Network, lambda_e: f64, lambda_c: f64) -> Result<RegValue> {
    let norms = frob_norms(net)?;
    let energy: f64 = norms.iter().map(|&n| (n * n).ln()).sum();
    let complexity = complexity_sum(net, &norms);
    Ok(RegValue {
        total: lambda_e * energy + lambda_c * complexity,
        energy_term: energy,
        complexity_term: complexity,
    })
}

/// CNN variant: conv layers contribute squared norms, dense layers enter
/// with exponent 1 (the square root), trading shift invariance across the
/// conv/dense boundary for a sharper kernel penalty. Invariance among the
/// conv layers is kept.
pub fn weissi_cnn(net: &Network, lambda_e: f64, lambda_c: f64) -> Result<RegValue> {
    let weights = net.weights();
    if !weights.iter().any(|w| w.kind == WeightKind::Dense) {
        return Err(Error::NoDenseHead);
    }
    let norms = frob_norms(net)?;
    let mut energy = 1.0;
    for (w, &n) in weights.iter().zip(&norms) {
        energy *= match w.kind {
            WeightKind::Conv => n * n,
            WeightKind::Dense => n,
        };
    }
    let complexity = complexity_sum(net, &norms);
    Ok(RegValue {
        total: lambda_e * energy + lambda_c * complexity,
        energy_term: energy,
        complexity_term: complexity,
    })
}

/// Evaluate the configured regularizer.
pub fn reg_value(net: &Network, cfg: &RegularizerConfig) -> Result<RegValue> {
    match cfg.kind {
        RegKind::None => Ok(RegValue::default()),
        RegKind::Wd => {
            let raw = wd(net);
            Ok(RegValue {
                total: cfg.lambda_wd * raw,
                energy_term: raw,
                complexity_term: 0.0,
            })
        }
        RegKind::Lpq => {
            let raw = lpq_family(net, cfg.p, cfg.q)?;
            Ok(RegValue {
                total: cfg.lambda_wd * raw,
                energy_term: raw,
                complexity_term: 0.0,
            })
        }
        RegKind::Weissi => weissi(net, cfg.lambda_e, cfg.lambda_c),
        RegKind::WeissiLog => weissi_log(net, cfg.lambda_e, cfg.lambda_c),
        RegKind::WeissiCnn => weissi_cnn(net, cfg.lambda_e, cfg.lambda_c),
    }
}

/// Analytic gradient of `reg_value(net, cfg).total` with respect to every
/// weight tensor, in `net.weights()` order (kernel-shaped for conv layers).
pub fn reg_grad(net: &Network, cfg: &RegularizerConfig) -> Result<Vec<Tensor>> {
    let weights = net.weights();
    match cfg.kind {
        RegKind::None => Ok(weights.iter().map(|w| Tensor::zeros(w.tensor.shape())).collect()),
        RegKind::Wd => Ok(weights
            .iter()
            .map(|w| w.tensor.scale(2.0 * cfg.lambda_wd))
            .collect()),
        RegKind::Lpq => {
            let (p, q, lam) = (cfg.p, cfg.q, cfg.lambda_wd);
            if p < 1.0 || q < 1.0 {
                return Err(Error::ConfigInvalid {
                    field: "reg.p/q",
                    message: format!("lpq requires p, q >= 1, got ({p}, {q})"),
                });
            }
            let mut grads = Vec::with_capacity(weights.len());
            for w in &weights {
                let m = weight_matrix(w.tensor, w.kind);
                let (rows, cols) = (m.rows(), m.cols());
                let mut gm = vec![0.0; rows * cols];
                for r in 0..rows {
                    let row = m.row(r);
                    let rp: f64 = row.iter().map(|&x| x.abs().powf(p)).sum();
                    if rp == 0.0 {
                        continue;
                    }
                    let row_norm = rp.powf(1.0 / p);
                    let outer = q * row_norm.powf(q - p);
                    for (c, &x) in row.iter().enumerate() {
                        if x != 0.0 {
                            gm[r * cols + c] = lam * outer * x.abs().powf(p - 1.0) * x.signum();
                        }
                    }
                }
                grads.push(scatter_matrix_grad(&gm, w.tensor, w.kind));
            }
            Ok(grads)
        }
        RegKind::Weissi | RegKind::WeissiLog | RegKind::WeissiCnn => {
            let norms = frob_norms(net)?;
            let (le, lc) = (cfg.lambda_e, cfg.lambda_c);
            // per-layer energy factors and the product of all the others
            let factors: Vec<f64> = match cfg.kind {
                RegKind::Weissi | RegKind::WeissiLog => norms.iter().map(|&n| n * n).collect(),
                RegKind::WeissiCnn => {
                    if !weights.iter().any(|w| w.kind == WeightKind::Dense) {
                        return Err(Error::NoDenseHead);
                    }
                    weights
                        .iter()
                        .zip(&norms)
                        .map(|(w, &n)| match w.kind {
                            WeightKind::Conv => n * n,
                            WeightKind::Dense => n,
                        })
                        .collect()
                }
                _ => unreachable!(),
            };
            let others = product_of_others(&factors);
            let mut grads = Vec::with_capacity(weights.len());
            for (l, (w, &n)) in weights.iter().zip(&norms).enumerate() {
                // d energy / d W_l
                let egrad_scale = match cfg.kind {
                    RegKind::Weissi => 2.0 * others[l],
                    RegKind::WeissiLog => 2.0 / (n * n),
                    RegKind::WeissiCnn => match w.kind {
                        WeightKind::Conv => 2.0 * others[l],
                        WeightKind::Dense => others[l] / n,
                    },
                    _ => unreachable!(),
                };
                let l1 = w.tensor.l1_norm();
                let mut g = Tensor::zeros(w.tensor.shape());
                for ((gv, &wv), _) in g
                    .data_mut()
                    .iter_mut()
                    .zip(w.tensor.data())
                    .zip(std::iter::repeat(()))
                {
                    let sign = if wv > 0.0 {
                        1.0
                    } else if wv < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    // quotient rule for ||W/||W||_F||_1
                    let cgrad = sign / n - l1 * wv / (n * n * n);
                    *gv = le * egrad_scale * wv + lc * cgrad;
                }
                grads.push(g);
            }
            Ok(grads)
        }
    }
}

/// prod_{j != l} factors[j] via prefix/suffix products (no division).
fn product_of_others(factors: &[f64]) -> Vec<f64> {
    let n = factors.len();
    let mut prefix = vec![1.0; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] * factors[i];
    }
    let mut suffix = vec![1.0; n + 1];
    for i in (0..n).rev() {
        suffix[i] = suffix[i + 1] * factors[i];
    }
    (0..n).map(|l| prefix[l] * suffix[l + 1]).collect()
}

fn scatter_matrix_grad(gm: &[f64], w: &Tensor, kind: WeightKind) -> Tensor {
    match kind {
        WeightKind::Dense => Tensor::new(w.shape().to_vec(), gm.to_vec()).expect("dense grad"),
        WeightKind::Conv => {
            let s = w.shape();
            let (k, c_in, c_out) = (s[0], s[2], s[3]);
            let cols = k * k * c_in;
            let mut g = Tensor::zeros(s);
            for kr in 0..k {
                for kq in 0..k {
                    for ci in 0..c_in {
                        let col = (kr * k + kq) * c_in + ci;
                        let base = ((kr * k + kq) * c_in + ci) * c_out;
                        for co in 0..c_out {
                            g.data_mut()[base + co] = gm[co * cols + col];
                        }
                    }
                }
            }
            g
        }
    }
}

/// Build the configured regularizer as a tape expression over staged weight
/// vars. For the Lpq kind only dense (rank-2) weights are supported on the
/// tape; conv kernels go through the analytic path.
pub fn reg_on_tape(tape: &Tape, weights: &[(Var, WeightKind)], cfg: &RegularizerConfig) -> Result<Var> {
    let zero = || tape.leaf(Tensor::scalar(0.0), false);
    match cfg.kind {
        RegKind::None => Ok(zero()),
        RegKind::Wd => {
            let mut acc: Option<Var> = None;
            for &(w, _) in weights {
                let nsq = tape.sum(tape.mul(w, w)?)?;
                acc = Some(match acc {
                    Some(a) => tape.add(a, nsq)?,
                    None => nsq,
                });
            }
            tape.scale(acc.unwrap_or_else(zero), cfg.lambda_wd)
        }
        RegKind::Lpq => {
            let (p, q) = (cfg.p, cfg.q);
            let mut acc: Option<Var> = None;
            for &(w, kind) in weights {
                if kind != WeightKind::Dense {
                    return Err(Error::UnsupportedLayer {
                        op: "reg_on_tape(lpq)",
                        kind: "conv2d",
                    });
                }
                let shape = tape.shape_of(w);
                let ones = tape.leaf(Tensor::full(&[shape[1], 1], 1.0), false);
                let pw = tape.pow(tape.abs(w)?, p)?;
                let row_sums = tape.matmul(pw, ones)?;
                let rq = tape.pow(row_sums, q / p)?;
                let s = tape.sum(rq)?;
                acc = Some(match acc {
                    Some(a) => tape.add(a, s)?,
                    None => s,
                });
            }
            tape.scale(acc.unwrap_or_else(zero), cfg.lambda_wd)
        }
        RegKind::Weissi | RegKind::WeissiLog | RegKind::WeissiCnn => {
            let mut energy: Option<Var> = None;
            let mut complexity: Option<Var> = None;
            for &(w, kind) in weights {
                let nsq = tape.sum(tape.mul(w, w)?)?;
                let fro = tape.sqrt(nsq)?;
                let efac = match cfg.kind {
                    RegKind::Weissi => nsq,
                    RegKind::WeissiLog => tape.ln(nsq)?,
                    RegKind::WeissiCnn => match kind {
                        WeightKind::Conv => nsq,
                        WeightKind::Dense => fro,
                    },
                    _ => unreachable!(),
                };
                energy = Some(match (energy, cfg.kind) {
                    (None, _) => efac,
                    (Some(e), RegKind::WeissiLog) => tape.add(e, efac)?,
                    (Some(e), _) => tape.mul(e, efac)?,
                });
                let l1 = tape.sum(tape.abs(w)?)?;
                let c = tape.div(l1, fro)?;
                complexity = Some(match complexity {
                    Some(acc) => tape.add(acc, c)?,
                    None => c,
                });
            }
            let e = tape.scale(energy.unwrap_or_else(zero), cfg.lambda_e)?;
            let c = tape.scale(complexity.unwrap_or_else(zero), cfg.lambda_c)?;
            tape.add(e, c)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{self, InitScheme, Layer, Network};
    use crate::oracles;
    use crate::rng;
    use crate::scale_shift::{apply_shift, ScaleShift};
    use rand::Rng;

    fn two_ones_net() -> Network {
        Network::new(
            vec![2],
            vec![
                Layer::Dense {
                    w: Tensor::full(&[2, 2], 1.0),
                    bias: None,
                },
                Layer::Relu,
                Layer::Dense {
                    w: Tensor::full(&[1, 2], 1.0),
                    bias: None,
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn wd_hand_cases() {
        let mut zero = nn::mlp(&[3, 3, 2], false).unwrap();
        zero.init(InitScheme::Constant(0.0), 0);
        assert_eq!(wd(&zero), 0.0);
        assert_eq!(wd(&two_ones_net()), 6.0);
    }

    #[test]
    fn lpq_reduces_to_wd_and_hand_l1() {
        let mut rng = rng::stream(41, "net");
        let net = nn::random_mlp(&mut rng, false);
        let a = lpq_family(&net, 2.0, 2.0).unwrap();
        let b = wd(&net);
        assert!((a - b).abs() / b < 1e-12);

        let m = Network::new(
            vec![2],
            vec![Layer::Dense {
                w: Tensor::from_rows(&[&[1.0, -2.0], &[3.0, 0.0]]).unwrap(),
                bias: None,
            }],
        )
        .unwrap();
        assert_eq!(lpq_family(&m, 1.0, 1.0).unwrap(), 6.0);
    }

    #[test]
    fn lpq_layer_scaling_is_q_homogeneous() {
        let mut rng = rng::stream(42, "net");
        let net = nn::random_mlp(&mut rng, false);
        for &(p, q) in &[(1.0, 1.0), (2.0, 2.0), (2.0, 1.0), (3.0, 2.0)] {
            let w0 = net.weights()[0].tensor.clone();
            let v0 = weight_matrix(&w0, WeightKind::Dense).lpq_norm_q(p, q).unwrap();
            let gamma = 1.7;
            let v1 = weight_matrix(&w0.scale(gamma), WeightKind::Dense)
                .lpq_norm_q(p, q)
                .unwrap();
            assert!((v1 - gamma.powf(q) * v0).abs() / v1 < 1e-12);
        }
    }

    #[test]
    fn weissi_values_and_invariance() {
        let mut rng = rng::stream(43, "net");
        for _ in 0..20 {
            let net = nn::random_mlp(&mut rng, false);
            let v = weissi(&net, 1.0, 1.0).unwrap();
            let vl = weissi_log(&net, 1.0, 1.0).unwrap();
            assert!((vl.energy_term - v.energy_term.ln()).abs() < 1e-9);
            let shift = ScaleShift::random(&mut rng, net.weights().len(), 1.2);
            let shifted = apply_shift(&net, &shift).unwrap();
            let vs = weissi(&shifted, 1.0, 1.0).unwrap();
            let vls = weissi_log(&shifted, 1.0, 1.0).unwrap();
            let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-300);
            assert!(rel(v.energy_term, vs.energy_term) < 1e-12);
            assert!(rel(v.complexity_term, vs.complexity_term) < 1e-12);
            assert!(rel(vl.complexity_term, vls.complexity_term) < 1e-12);
            assert!((vl.energy_term - vls.energy_term).abs() < 1e-10);
            // wd is NOT invariant
            let delta = (wd(&net) - wd(&shifted)).abs();
            assert!(delta > 1e-9, "wd should move under a random shift");
        }
    }

    #[test]
    fn weissi_hand_energy() {
        // two layers with Frobenius norms 2 and 3 -> energy 36
        let mut net = nn::mlp(&[3, 3, 3], false).unwrap();
        net.init(InitScheme::He, 1);
        for (i, target) in [2.0, 3.0].iter().enumerate() {
            let w = net
                .layers_mut()
                .iter_mut()
                .filter_map(|l| match l {
                    Layer::Dense { w, .. } => Some(w),
                    _ => None,
                })
                .nth(i)
                .unwrap();
            let cur = w.frobenius();
            for v in w.data_mut() {
                *v *= target / cur;
            }
        }
        let v = weissi(&net, 1.0, 0.0).unwrap();
        assert!((v.energy_term - 36.0).abs() < 1e-9);
    }

    #[test]
    fn weissi_rejects_zero_norm_layer() {
        let mut net = nn::mlp(&[3, 3, 3], false).unwrap();
        net.init(InitScheme::Constant(0.0), 0);
        assert!(matches!(weissi(&net, 1.0, 1.0), Err(Error::ZeroNormLayer { .. })));
    }

    #[test]
    fn weissi_log_deep_net_stays_finite() {
        // 50 layers of norm 10: raw product is 10^100, log form is 100·ln 10
        let dims: Vec<usize> = vec![4; 51];
        let mut net = nn::mlp(&dims, false).unwrap();
        net.init(InitScheme::He, 2);
        for layer in net.layers_mut() {
            if let Layer::Dense { w, .. } = layer {
                let cur = w.frobenius();
                for v in w.data_mut() {
                    *v *= 10.0 / cur;
                }
            }
        }
        let v = weissi_log(&net, 1.0, 0.0).unwrap();
        let want = 100.0 * 10.0f64.ln();
        assert!((v.energy_term - want).abs() / want < 1e-12);
        assert!(v.energy_term.is_finite());
    }

    #[test]
    fn weissi_cnn_hand_case_and_asymmetry() {
        let mut net = Network::new(
            vec![1, 5, 5],
            vec![
                Layer::Conv2d {
                    kernel: Tensor::zeros(&[3, 3, 1, 2]),
                    bias: None,
                    stride: 1,
                    padding: 1,
                },
                Layer::Relu,
                Layer::Conv2d {
                    kernel: Tensor::zeros(&[3, 3, 2, 2]),
                    bias: None,
                    stride: 1,
                    padding: 1,
                },
                Layer::Relu,
                Layer::Flatten,
                Layer::Dense {
                    w: Tensor::zeros(&[2, 50]),
                    bias: None,
                },
            ],
        )
        .unwrap();
        net.init(InitScheme::He, 3);
        let targets = [2.0, 3.0, 4.0];
        let mut wi = 0;
        for layer in net.layers_mut() {
            let t = match layer {
                Layer::Conv2d { kernel, .. } => Some(kernel),
                Layer::Dense { w, .. } => Some(w),
                _ => None,
            };
            if let Some(t) = t {
                let cur = t.frobenius();
                for v in t.data_mut() {
                    *v *= targets[wi] / cur;
                }
                wi += 1;
            }
        }
        let v = weissi_cnn(&net, 1.0, 0.0).unwrap();
        assert!((v.energy_term - 144.0).abs() < 1e-9, "got {}", v.energy_term);

        // shifting scale between the conv layers leaves the value unchanged
        let s = ScaleShift::new(vec![1.8, 1.0 / 1.8, 1.0]).unwrap();
        let shifted = apply_shift(&net, &s).unwrap();
        let vs = weissi_cnn(&shifted, 1.0, 0.0).unwrap();
        assert!((vs.energy_term - 144.0).abs() / 144.0 < 1e-12);

        // shifting conv <-> dense changes it by gamma (documented asymmetry)
        let gamma: f64 = 1.5;
        let s = ScaleShift::new(vec![1.0, gamma, 1.0 / gamma]).unwrap();
        let shifted = apply_shift(&net, &s).unwrap();
        let vs = weissi_cnn(&shifted, 1.0, 0.0).unwrap();
        assert!((vs.energy_term - 144.0 * gamma).abs() / (144.0 * gamma) < 1e-12);
    }

    #[test]
    fn weissi_cnn_requires_dense_head() {
        let net = Network::new(
            vec![1, 3, 3],
            vec![Layer::Conv2d {
                kernel: Tensor::full(&[3, 3, 1, 1], 0.5),
                bias: None,
                stride: 1,
                padding: 1,
            }],
        )
        .unwrap();
        assert!(matches!(weissi_cnn(&net, 1.0, 1.0), Err(Error::NoDenseHead)));
    }

    #[test]
    fn wd_gradient_is_two_w() {
        let mut rng = rng::stream(44, "net");
        let net = nn::random_mlp(&mut rng, false);
        let cfg = RegularizerConfig::wd(0.3);
        let grads = reg_grad(&net, &cfg).unwrap();
        for (g, w) in grads.iter().zip(net.weights()) {
            assert!(g.max_abs_diff(&w.tensor.scale(0.6)) < 1e-15);
        }
    }

    fn fd_check(net: &Network, cfg: &RegularizerConfig, tol: f64) {
        let grads = reg_grad(net, cfg).unwrap();
        let widx = net.weight_param_indices();
        for (wi, &pi) in widx.iter().enumerate() {
            let mut probe_net = net.clone();
            let x = net.weights()[wi].tensor.data().to_vec();
            let mut f = |v: &[f64]| -> f64 {
                probe_net.params_mut()[pi].data_mut().copy_from_slice(v);
                reg_value(&probe_net, cfg).unwrap().total
            };
            let fd = oracles::finite_difference_gradient(&mut f, &x, 1e-6);
            let rel = oracles::max_rel_err_scaled(grads[wi].data(), &fd);
            assert!(rel < tol, "kind {:?} layer {wi}: rel err {rel}", cfg.kind);
        }
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let mut rng = rng::stream(45, "net");
        let net = nn::random_mlp(&mut rng, false);
        fd_check(&net, &RegularizerConfig::wd(1.0), 1e-4);
        fd_check(&net, &RegularizerConfig::weissi(1.0, 1.0), 1e-4);
        fd_check(&net, &RegularizerConfig::weissi_log(1.0, 1.0), 1e-4);
        fd_check(&net, &RegularizerConfig::lpq(2.0, 1.0, 1.0), 1e-4);
        fd_check(&net, &RegularizerConfig::lpq(3.0, 2.0, 1.0), 1e-4);
    }

    #[test]
    fn analytic_gradients_match_tape_gradients() {
        let mut rng = rng::stream(46, "net");
        let net = nn::random_mlp(&mut rng, false);
        for cfg in [
            RegularizerConfig::wd(0.7),
            RegularizerConfig::weissi(0.3, 1.3),
            RegularizerConfig::weissi_log(1.1, 0.2),
            RegularizerConfig::lpq(2.0, 1.0, 0.9),
        ] {
            let tape = Tape::new();
            let wvars: Vec<(Var, WeightKind)> = net
                .weights()
                .iter()
                .map(|w| (tape.leaf(w.tensor.clone(), true), w.kind))
                .collect();
            let total = reg_on_tape(&tape, &wvars, &cfg).unwrap();
            tape.backward(total).unwrap();
            let analytic = reg_grad(&net, &cfg).unwrap();
            for ((v, _), a) in wvars.iter().zip(&analytic) {
                let g = tape.grad(*v).unwrap();
                let rel = oracles::max_rel_err(g.data(), a.data(), 1e-9);
                assert!(rel < 1e-10, "kind {:?}: rel {rel}", cfg.kind);
            }
        }
    }

    #[test]
    fn weissi_energy_gradient_scales_with_other_layers() {
        let mut rng = rng::stream(47, "net");
        let mut net = nn::mlp(&[4, 5, 6, 2], false).unwrap();
        net.init(InitScheme::He, 9);
        let cfg = RegularizerConfig::weissi(1.0, 0.0);
        let g0 = reg_grad(&net, &cfg).unwrap();
        // double layer 1 -> every other layer's energy gradient x4
        if let Layer::Dense { w, .. } = net
            .layers_mut()
            .iter_mut()
            .filter(|l| matches!(l, Layer::Dense { .. }))
            .nth(1)
            .unwrap()
        {
            for v in w.data_mut() {
                *v *= 2.0;
            }
        }
        let g1 = reg_grad(&net, &cfg).unwrap();
        for l in [0usize, 2] {
            let r = g1[l].frobenius() / g0[l].frobenius();
            assert!((r - 4.0).abs() < 1e-9, "layer {l}: ratio {r}");
        }
        let _ = rng.gen::<u64>();
    }
}
