//! The weight-scale-shift algebra: equivalent-network transforms under
//! per-layer positive scale factors with unit product, the closed-form
//! minimized regularizers that make the ineffective family ineffective,
//! and canonical forms that factor the network into unit-norm layers plus
//! a single scalar energy.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Aggregation, Layer, Network, Shortcut, WeightKind};
use crate::rng;
use crate::tensor::Tensor;

const PRODUCT_TOL: f64 = 1e-12;

/// Per-layer scale factors gamma_l > 0 with prod gamma_l = 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleShift {
    gammas: Vec<f64>,
}

impl ScaleShift {
    pub fn new(gammas: Vec<f64>) -> Result<Self> {
        for (i, &g) in gammas.iter().enumerate() {
            if !(g > 0.0) || !g.is_finite() {
                return Err(Error::NonPositiveGamma { index: i, value: g });
            }
        }
        let product: f64 = gammas.iter().product();
        if (product - 1.0).abs() > PRODUCT_TOL {
            return Err(Error::GammaProductNotOne { product });
        }
        Ok(ScaleShift { gammas })
    }

    pub fn identity(n: usize) -> Self {
        ScaleShift {
            gammas: vec![1.0; n],
        }
    }

    /// Random valid shift: mean-centered log-gammas drawn uniformly from
    /// [-log_range, log_range].
    pub fn random(rng: &mut ChaCha12Rng, n: usize, log_range: f64) -> Self {
        let mut logs: Vec<f64> = (0..n).map(|_| rng.gen_range(-log_range..log_range)).collect();
        let mean = logs.iter().sum::<f64>() / n as f64;
        for l in &mut logs {
            *l -= mean;
        }
        ScaleShift {
            gammas: logs.iter().map(|&l| l.exp()).collect(),
        }
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gammas
    }

    pub fn len(&self) -> usize {
        self.gammas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gammas.is_empty()
    }
}

/// Squared Frobenius norm of every weight layer, in layer order.
pub fn layer_norms_sq(net: &Network) -> Vec<f64> {
    net.weights().iter().map(|w| w.tensor.frobenius_sq()).collect()
}

/// Shift weight scale between the layers of a feedforward stack:
/// W̃_l = gamma_l · W_l and b̃_l = (prod_{j<=l} gamma_j) · b_l. With unit
/// gamma product the returned network computes the identical function.
///
/// Residual layers are rejected here; use [`apply_residual_shift`], which
/// also rescales the aggregation shortcut.
pub fn apply_shift(net: &Network, shift: &ScaleShift) -> Result<Network> {
    let n_weights = net
        .layers()
        .iter()
        .filter(|l| matches!(l, Layer::Dense { .. } | Layer::Conv2d { .. }))
        .count();
    for layer in net.layers() {
        if matches!(layer, Layer::Residual(_)) {
            return Err(Error::UnsupportedLayer {
                op: "apply_shift",
                kind: "residual_block",
            });
        }
    }
    if shift.len() != n_weights {
        return Err(Error::GammaCountMismatch {
            expected: n_weights,
            got: shift.len(),
        });
    }
    let mut out = net.clone();
    let mut li = 0usize;
    let mut cumulative = 1.0;
    for layer in out.layers_mut() {
        match layer {
            Layer::Dense { w, bias } => {
                let g = shift.gammas()[li];
                li += 1;
                cumulative *= g;
                for v in w.data_mut() {
                    *v *= g;
                }
                if let Some(b) = bias {
                    for v in b.data_mut() {
                        *v *= cumulative;
                    }
                }
            }
            Layer::Conv2d { kernel, bias, .. } => {
                let g = shift.gammas()[li];
                li += 1;
                cumulative *= g;
                for v in kernel.data_mut() {
                    *v *= g;
                }
                if let Some(b) = bias {
                    for v in b.data_mut() {
                        *v *= cumulative;
                    }
                }
            }
            _ => {}
        }
    }
    Ok(out)
}

/// Scale shift for a residual chain: per identity/projection block a pair
/// (gamma1, gamma2) for the branch weights, plus a head factor. The block's
/// shortcut is rescaled by c = gamma1·gamma2 (projection weight when
/// present, otherwise the aggregation shortcut scalar), which keeps the
/// function unchanged when head_gamma · prod_l c_l = 1.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResidualShift {
    pub block_gammas: Vec<(f64, f64)>,
    pub head_gamma: f64,
}

impl ResidualShift {
    pub fn validate(&self) -> Result<()> {
        let mut product = self.head_gamma;
        if !(self.head_gamma > 0.0) {
            return Err(Error::NonPositiveGamma {
                index: self.block_gammas.len(),
                value: self.head_gamma,
            });
        }
        for (i, &(g1, g2)) in self.block_gammas.iter().enumerate() {
            if !(g1 > 0.0) || !(g2 > 0.0) {
                return Err(Error::NonPositiveGamma {
                    index: i,
                    value: if g1 > 0.0 { g2 } else { g1 },
                });
            }
            product *= g1 * g2;
        }
        if (product - 1.0).abs() > 1e-9 {
            return Err(Error::GammaProductNotOne { product });
        }
        Ok(())
    }

    pub fn random(rng: &mut ChaCha12Rng, blocks: usize, log_range: f64) -> Self {
        let mut logs: Vec<f64> = (0..2 * blocks).map(|_| rng.gen_range(-log_range..log_range)).collect();
        let head_log: f64 = -logs.iter().sum::<f64>();
        let gammas: Vec<f64> = logs.drain(..).map(f64::exp).collect();
        ResidualShift {
            block_gammas: gammas.chunks(2).map(|c| (c[0], c[1])).collect(),
            head_gamma: head_log.exp(),
        }
    }
}

/// Apply a [`ResidualShift`] to a residual chain (residual blocks followed
/// by an activation and a dense head). Convex aggregations become fixed
/// scalars carrying the shortcut multiplier.
pub fn apply_residual_shift(net: &Network, shift: &ResidualShift) -> Result<Network> {
    shift.validate()?;
    let blocks = net
        .layers()
        .iter()
        .filter(|l| matches!(l, Layer::Residual(_)))
        .count();
    if shift.block_gammas.len() != blocks {
        return Err(Error::GammaCountMismatch {
            expected: blocks,
            got: shift.block_gammas.len(),
        });
    }
    let mut out = net.clone();
    let mut bi = 0usize;
    let mut carried = 1.0; // scale of the running hidden state
    for layer in out.layers_mut() {
        match layer {
            Layer::Residual(block) => {
                let (g1, g2) = shift.block_gammas[bi];
                bi += 1;
                let c = g1 * g2;
                for v in block.w1.data_mut() {
                    *v *= g1;
                }
                for v in block.w2.data_mut() {
                    *v *= g2;
                }
                if let Some(b1) = &mut block.b1 {
                    for v in b1.data_mut() {
                        *v *= g1 * carried;
                    }
                }
                if let Some(b2) = &mut block.b2 {
                    for v in b2.data_mut() {
                        *v *= c * carried;
                    }
                }
                match &mut block.shortcut {
                    Shortcut::Project { w3 } => {
                        for v in w3.data_mut() {
                            *v *= c;
                        }
                    }
                    Shortcut::Identity => {
                        let (alpha, beta) = block.agg.weights();
                        block.agg = Aggregation::Fixed {
                            alpha: c * alpha,
                            beta,
                        };
                    }
                }
                carried *= c;
            }
            Layer::Dense { w, bias } => {
                // chain head
                for v in w.data_mut() {
                    *v *= shift.head_gamma;
                }
                if let Some(b) = bias {
                    for v in b.data_mut() {
                        *v *= shift.head_gamma * carried;
                    }
                }
            }
            _ => {}
        }
    }
    Ok(out)
}

/// Minimized weight decay over all equivalent networks (scale shifts with
/// unit product): L* = (L+1)·(prod ||W_l||²)^(1/(L+1)), attained where all
/// shifted norms agree. Input is the per-layer squared norms.
pub fn minimized_wd(norms_sq: &[f64]) -> Result<(f64, ScaleShift)> {
    for (i, &v) in norms_sq.iter().enumerate() {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::ZeroNormLayer { index: i });
        }
    }
    let n = norms_sq.len() as f64;
    let logs: Vec<f64> = norms_sq.iter().map(|&v| v.ln()).collect();
    let mean_log = logs.iter().sum::<f64>() / n;
    let value = n * mean_log.exp();
    let gammas: Vec<f64> = logs.iter().map(|&l| (0.5 * (mean_log - l)).exp()).collect();
    Ok((value, ScaleShift::new(gammas)?))
}

/// Minimized value and optimal gammas for any regularizer sum_l g(W_l)
/// with g(gamma·W) = gamma^p · g(W): the minimum over unit-product shifts
/// is (L+1)·(prod g(W_l))^(1/(L+1)), independent of p; the optimizer is
/// gamma_l = [(prod g)^(1/(L+1)) / g(W_l)]^(1/p).
pub fn minimized_family(g_values: &[f64], p: f64) -> Result<(f64, ScaleShift)> {
    if !(p > 0.0) {
        return Err(Error::InvalidArgument {
            op: "minimized_family",
            message: format!("homogeneity exponent p = {p} must be positive"),
        });
    }
    for (i, &v) in g_values.iter().enumerate() {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::ZeroNormLayer { index: i });
        }
    }
    let n = g_values.len() as f64;
    let logs: Vec<f64> = g_values.iter().map(|&v| v.ln()).collect();
    let mean_log = logs.iter().sum::<f64>() / n;
    let value = n * mean_log.exp();
    let gammas: Vec<f64> = logs.iter().map(|&l| ((mean_log - l) / p).exp()).collect();
    Ok((value, ScaleShift::new(gammas)?))
}

/// Layer normalizer used for canonical forms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "norm", rename_all = "snake_case")]
pub enum Normalizer {
    Frobenius,
    Lpq { p: f64, q: f64 },
}

impl Normalizer {
    pub fn eval(&self, w: &Tensor, kind: WeightKind) -> Result<f64> {
        match *self {
            Normalizer::Frobenius => Ok(w.frobenius()),
            Normalizer::Lpq { p, q } => {
                if p < 1.0 || q < 1.0 {
                    return Err(Error::InvalidArgument {
                        op: "normalizer",
                        message: format!("p, q must be >= 1, got ({p}, {q})"),
                    });
                }
                crate::reg::weight_matrix(w, kind).lpq_norm(p, q)
            }
        }
    }
}

/// A network factored into unit-norm layers and one scalar energy.
#[derive(Clone, Debug)]
pub struct CanonicalForm {
    pub normalized_weights: Vec<Tensor>,
    pub per_layer_norms: Vec<f64>,
    pub energy: f64,
    pub normalizer: Normalizer,
}

/// Factor the scale out of every weight layer: eta_l = eta(W_l), unit-norm
/// weights W_l / eta_l, energy = prod eta_l. Invariant under any valid
/// scale shift of the input network.
pub fn canonicalize(net: &Network, normalizer: Normalizer) -> Result<CanonicalForm> {
    let mut normalized = Vec::new();
    let mut norms = Vec::new();
    let mut energy = 1.0;
    for (i, w) in net.weights().iter().enumerate() {
        let eta = normalizer.eval(w.tensor, w.kind)?;
        if !(eta > 0.0) {
            return Err(Error::ZeroNormLayer { index: i });
        }
        normalized.push(w.tensor.scale(1.0 / eta));
        norms.push(eta);
        energy *= eta;
    }
    Ok(CanonicalForm {
        normalized_weights: normalized,
        per_layer_norms: norms,
        energy,
        normalizer,
    })
}

/// Probe two networks on random inputs and report the largest deviation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub max_abs_diff: f64,
    pub probes: usize,
}

pub fn check_equivalence(a: &Network, b: &Network, n_probes: usize, seed: u64) -> Result<EquivalenceReport> {
    if a.input_shape() != b.input_shape() || a.output_dim() != b.output_dim() {
        return Err(Error::ShapeMismatch {
            op: "check_equivalence",
            lhs: a.input_shape().to_vec(),
            rhs: b.input_shape().to_vec(),
        });
    }
    let mut rng = rng::stream(seed, "equivalence-probe");
    let d: usize = a.input_shape().iter().product();
    let probe = |rng: &mut ChaCha12Rng| -> Tensor {
        let data: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Tensor::new(a.input_shape().to_vec(), data).expect("probe shape")
    };
    let max = (0..n_probes).try_fold(0.0f64, |acc, _| -> Result<f64> {
        let x = probe(&mut rng);
        let ya = a.forward(&x)?;
        let yb = b.forward(&x)?;
        Ok(acc.max(ya.max_abs_diff(&yb)))
    })?;
    Ok(EquivalenceReport {
        max_abs_diff: max,
        probes: n_probes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{self, InitScheme};
    use crate::oracles;

    fn random_net(seed: u64) -> Network {
        let mut rng = rng::stream(seed, "net");
        nn::random_mlp(&mut rng, true)
    }

    #[test]
    fn shift_validation() {
        assert!(ScaleShift::new(vec![2.0, 0.5]).is_ok());
        assert!(matches!(
            ScaleShift::new(vec![2.0, -0.5]),
            Err(Error::NonPositiveGamma { .. })
        ));
        assert!(matches!(
            ScaleShift::new(vec![2.0, 0.7]),
            Err(Error::GammaProductNotOne { .. })
        ));
    }

    #[test]
    fn identity_shift_is_identity() {
        let net = random_net(1);
        let shifted = apply_shift(&net, &ScaleShift::identity(net.weights().len())).unwrap();
        for (a, b) in net.params().iter().zip(shifted.params()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn two_layer_shift_preserves_function() {
        let mut net = nn::mlp(&[4, 6, 2], false).unwrap();
        net.init(InitScheme::He, 5);
        let shifted = apply_shift(&net, &ScaleShift::new(vec![2.0, 0.5]).unwrap()).unwrap();
        let rep = check_equivalence(&net, &shifted, 100, 9).unwrap();
        assert!(rep.max_abs_diff < 1e-12, "diff {}", rep.max_abs_diff);
    }

    #[test]
    fn bias_shift_uses_cumulative_products() {
        let mut net = nn::mlp(&[3, 5, 4, 2], true).unwrap();
        net.init(InitScheme::He, 6);
        let mut brng = rng::stream(6, "biases");
        for layer in net.layers_mut() {
            if let Layer::Dense { bias: Some(b), .. } = layer {
                for v in b.data_mut() {
                    *v = brng.gen_range(-1.0..1.0);
                }
            }
        }
        let shift = ScaleShift::new(vec![2.0, 3.0, 1.0 / 6.0]).unwrap();
        let shifted = apply_shift(&net, &shift).unwrap();
        // b̃_2 = (gamma_1·gamma_2)·b_2 = 6·b_2
        let get_bias = |n: &Network, which: usize| -> Tensor {
            n.layers()
                .iter()
                .filter_map(|l| match l {
                    Layer::Dense { bias: Some(b), .. } => Some(b.clone()),
                    _ => None,
                })
                .nth(which)
                .unwrap()
        };
        let b2 = get_bias(&net, 1);
        let b2s = get_bias(&shifted, 1);
        assert!(b2.scale(6.0).max_abs_diff(&b2s) < 1e-12);
        let rep = check_equivalence(&net, &shifted, 100, 10).unwrap();
        assert!(rep.max_abs_diff < 1e-9, "diff {}", rep.max_abs_diff);
    }

    #[test]
    fn shift_on_residual_net_rejected() {
        let net = nn::residual_chain(3, 4, 4, 1, 2, true, false, false).unwrap();
        let err = apply_shift(&net, &ScaleShift::identity(net.weights().len())).unwrap_err();
        assert!(matches!(err, Error::UnsupportedLayer { .. }));
    }

    #[test]
    fn gamma_count_mismatch_rejected() {
        let net = random_net(2);
        let err = apply_shift(&net, &ScaleShift::identity(net.weights().len() + 1)).unwrap_err();
        assert!(matches!(err, Error::GammaCountMismatch { .. }));
    }

    #[test]
    fn minimized_wd_equal_norms() {
        let (v, s) = minimized_wd(&[3.0, 3.0, 3.0, 3.0]).unwrap();
        assert!((v - 12.0).abs() < 1e-12);
        for &g in s.gammas() {
            assert!((g - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn minimized_wd_closed_form_matches_oracles() {
        let norms_sq = [9.0, 4.0, 1.0];
        let (v, s) = minimized_wd(&norms_sq).unwrap();
        let want = 3.0 * 36.0f64.powf(1.0 / 3.0);
        assert!((v - want).abs() < 1e-12);
        // frozen value from the independent minimizers
        let (oracle, _) = oracles::minimize_shifted_sum(&norms_sq, 2.0);
        assert!((v - oracle).abs() / v < 1e-8, "{v} vs {oracle}");
        let grid = oracles::grid_minimize_shifted_sum(&norms_sq, 2.0, 24);
        assert!((v - grid).abs() / v < 1e-8, "{v} vs {grid}");
        // shifted norms all equal
        let shifted: Vec<f64> = s
            .gammas()
            .iter()
            .zip(&norms_sq)
            .map(|(&g, &n)| g * g * n)
            .collect();
        for w in shifted.windows(2) {
            assert!((w[0] - w[1]).abs() / w[0] < 1e-12);
        }
        let prod: f64 = s.gammas().iter().product();
        assert!((prod - 1.0).abs() < 1e-12);
    }

    #[test]
    fn minimized_wd_two_layer_fig1_point() {
        // norms² (4, 1): minimum 4, equal shifted norms sqrt(2)
        let (v, s) = minimized_wd(&[4.0, 1.0]).unwrap();
        assert!((v - 4.0).abs() < 1e-12);
        let n1 = (s.gammas()[0] * s.gammas()[0] * 4.0).sqrt();
        let n2 = (s.gammas()[1] * s.gammas()[1] * 1.0).sqrt();
        assert!((n1 - 2.0f64.sqrt()).abs() < 1e-12);
        assert!((n2 - 2.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn minimized_wd_rejects_zero_norm() {
        assert!(matches!(
            minimized_wd(&[1.0, 0.0]),
            Err(Error::ZeroNormLayer { index: 1 })
        ));
    }

    #[test]
    fn minimized_family_unit_inputs() {
        let (v, s) = minimized_family(&[1.0, 1.0, 1.0], 2.0).unwrap();
        assert_eq!(v, 3.0);
        for &g in s.gammas() {
            assert!((g - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn minimized_family_independent_of_p_and_effective_factor() {
        let g = [2.5, 0.7, 1.9];
        let (v1, _) = minimized_family(&g, 1.0).unwrap();
        let (v2, _) = minimized_family(&g, 2.0).unwrap();
        let (v3, _) = minimized_family(&g, 3.7).unwrap();
        assert!((v1 - v2).abs() < 1e-12 && (v2 - v3).abs() < 1e-12);
        // doubling one g multiplies the value by 2^(1/(L+1))
        let mut g2 = g;
        g2[1] *= 2.0;
        let (vd, _) = minimized_family(&g2, 2.0).unwrap();
        let factor = vd / v2;
        assert!((factor - 2.0f64.powf(1.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn minimized_family_matches_projected_gradient_oracle() {
        // g = ||·||_{1,1} on three random matrices
        let mut rng = rng::stream(30, "fam");
        let mats: Vec<Tensor> = (0..3)
            .map(|_| {
                Tensor::new(vec![3, 4], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
            })
            .collect();
        let g: Vec<f64> = mats.iter().map(|m| m.lpq_norm_q(1.0, 1.0).unwrap()).collect();
        let (closed, _) = minimized_family(&g, 1.0).unwrap();
        let (numeric, _) = oracles::minimize_shifted_sum(&g, 1.0);
        assert!((closed - numeric).abs() / closed < 1e-6, "{closed} vs {numeric}");
    }

    #[test]
    fn canonicalize_invariance_and_energy() {
        let mut net = nn::mlp(&[4, 5, 6, 3], false).unwrap();
        net.init(InitScheme::He, 8);
        let canon = canonicalize(&net, Normalizer::Frobenius).unwrap();
        for w in &canon.normalized_weights {
            assert!((w.frobenius() - 1.0).abs() < 1e-12);
        }
        let mut rng = rng::stream(31, "shift");
        let s = ScaleShift::random(&mut rng, 3, 1.0);
        let shifted = apply_shift(&net, &s).unwrap();
        let canon2 = canonicalize(&shifted, Normalizer::Frobenius).unwrap();
        assert!((canon.energy - canon2.energy).abs() / canon.energy < 1e-12);
        for (a, b) in canon.normalized_weights.iter().zip(&canon2.normalized_weights) {
            assert!(a.max_abs_diff(b) < 1e-12);
        }
    }

    #[test]
    fn canonicalize_norms_product() {
        // layers scaled to norms 2, 3, 5 -> energy 30
        let mut net = nn::mlp(&[4, 4, 4, 4], false).unwrap();
        net.init(InitScheme::He, 12);
        for (i, target) in [2.0, 3.0, 5.0].iter().enumerate() {
            let layer_w = net
                .layers_mut()
                .iter_mut()
                .filter_map(|l| match l {
                    Layer::Dense { w, .. } => Some(w),
                    _ => None,
                })
                .nth(i)
                .unwrap();
            let cur = layer_w.frobenius();
            for v in layer_w.data_mut() {
                *v *= target / cur;
            }
        }
        let canon = canonicalize(&net, Normalizer::Frobenius).unwrap();
        assert!((canon.energy - 30.0).abs() < 1e-9);
    }

    #[test]
    fn equivalence_report_behaviour() {
        let net = random_net(3);
        let rep = check_equivalence(&net, &net, 10, 0).unwrap();
        assert_eq!(rep.max_abs_diff, 0.0);
        let mut rng = rng::stream(32, "shift");
        let s = ScaleShift::random(&mut rng, net.weights().len(), 1.0);
        let shifted = apply_shift(&net, &s).unwrap();
        let rep = check_equivalence(&net, &shifted, 100, 1).unwrap();
        assert!(rep.max_abs_diff < 1e-9);
        let mut perturbed = net.clone();
        if let Layer::Dense { w, .. } = &mut perturbed.layers_mut()[0] {
            w.data_mut()[0] += 1e-3;
        }
        let rep = check_equivalence(&net, &perturbed, 100, 2).unwrap();
        assert!(rep.max_abs_diff > 0.0);
    }

    #[test]
    fn residual_shift_preserves_function() {
        for (convex, bias, agg_first) in [(true, false, false), (true, true, true), (false, true, false)] {
            let mut net = nn::residual_chain(4, 5, 6, 3, 2, convex, agg_first, bias).unwrap();
            net.init(InitScheme::He, 21);
            if bias {
                let mut brng = rng::stream(22, "bias");
                for p in net.params_mut() {
                    if p.rank() == 1 && p.numel() > 1 {
                        for v in p.data_mut() {
                            *v = brng.gen_range(-0.3..0.3);
                        }
                    }
                }
            }
            let mut rng = rng::stream(23, "rshift");
            let shift = ResidualShift::random(&mut rng, 4, 0.8);
            let shifted = apply_residual_shift(&net, &shift).unwrap();
            let rep = check_equivalence(&net, &shifted, 60, 3).unwrap();
            assert!(rep.max_abs_diff < 1e-9, "diff {}", rep.max_abs_diff);
        }
    }

    #[test]
    fn wd_changes_by_predicted_factor_under_shift() {
        let net = random_net(7);
        let mut rng = rng::stream(33, "shift");
        let s = ScaleShift::random(&mut rng, net.weights().len(), 1.0);
        let shifted = apply_shift(&net, &s).unwrap();
        let wd0: f64 = layer_norms_sq(&net).iter().sum();
        let wd1: f64 = layer_norms_sq(&shifted).iter().sum();
        let predicted: f64 = layer_norms_sq(&net)
            .iter()
            .zip(s.gammas())
            .map(|(&n, &g)| g * g * n)
            .sum();
        assert!((wd1 - predicted).abs() / predicted < 1e-12);
        assert!((wd1 - wd0).abs() > 1e-9, "a random shift should change wd");
    }
}
