//! Machine-checkable property suites: the algebra identities, gradient
//! consistency, and the input-gradient bounds, each over randomized
//! instances. The CLI `verify` subcommand runs these and exits nonzero on
//! any failure; the acceptance tests pin their counts and tolerances.

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{self, BoundMode, GradTarget};
use crate::error::Result;
use crate::nn::{self, InitScheme};
use crate::oracles;
use crate::reg::{self, RegularizerConfig};
use crate::rng;
use crate::scale_shift::{self, apply_shift, ScaleShift};
use crate::tape::{Reduction, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Worst observed value (max error, violation count, ...).
    pub metric: f64,
    pub threshold: f64,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

impl SuiteReport {
    fn new(suite: &str) -> Self {
        SuiteReport {
            suite: suite.to_string(),
            passed: true,
            checks: Vec::new(),
        }
    }

    fn push(&mut self, name: &str, metric: f64, threshold: f64, detail: String) {
        let passed = metric <= threshold;
        self.passed &= passed;
        self.checks.push(CheckResult {
            name: name.to_string(),
            passed,
            metric,
            threshold,
            detail,
        });
    }

    fn push_bool(&mut self, name: &str, ok: bool, detail: String) {
        self.passed &= ok;
        self.checks.push(CheckResult {
            name: name.to_string(),
            passed: ok,
            metric: if ok { 0.0 } else { 1.0 },
            threshold: 0.0,
            detail,
        });
    }
}

fn random_input(rng: &mut rand_chacha::ChaCha12Rng, d: usize) -> Tensor {
    Tensor::new(vec![d], (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect()).expect("input")
}

/// Scale-shift equivalence, minimized closed forms, WEISSI invariance,
/// canonical-form invariance.
pub fn algebra_suite(seed: u64, n_nets: usize, n_shifts: usize, n_probes: usize) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("algebra");

    // 1. function equivalence under random shifts
    let worst_equiv = {
        let run_net = |i: usize| -> Result<f64> {
            let mut rng = rng::stream_indexed(seed, "algebra-net", i as u64);
            let net = nn::random_mlp(&mut rng, true);
            let mut worst = 0.0f64;
            for s in 0..n_shifts {
                let shift = ScaleShift::random(&mut rng, net.weights().len(), 1.2);
                let shifted = apply_shift(&net, &shift)?;
                let rep = scale_shift::check_equivalence(
                    &net,
                    &shifted,
                    n_probes,
                    seed ^ ((i * n_shifts + s) as u64),
                )?;
                worst = worst.max(rep.max_abs_diff);
            }
            Ok(worst)
        };
        #[cfg(feature = "parallel")]
        let diffs: Vec<f64> = (0..n_nets).into_par_iter().map(run_net).collect::<Result<_>>()?;
        #[cfg(not(feature = "parallel"))]
        let diffs: Vec<f64> = (0..n_nets).map(run_net).collect::<Result<_>>()?;
        diffs.into_iter().fold(0.0, f64::max)
    };
    report.push(
        "shift_function_equivalence",
        worst_equiv,
        1e-9,
        format!("{n_nets} nets x {n_shifts} shifts x {n_probes} probes"),
    );

    // 2. minimized weight decay: closed form vs black-box minimization
    let mut worst_closed = 0.0f64;
    let mut worst_norm_spread = 0.0f64;
    let mut worst_gamma_prod = 0.0f64;
    let mut rng = rng::stream(seed, "algebra-minwd");
    for _ in 0..n_nets {
        let n = rng.gen_range(2..=7usize);
        let norms_sq: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..3.0f64).exp()).collect();
        let (closed, gammas) = scale_shift::minimized_wd(&norms_sq)?;
        let (numeric, _) = oracles::minimize_shifted_sum(&norms_sq, 2.0);
        worst_closed = worst_closed.max((closed - numeric).abs() / closed);
        let shifted: Vec<f64> = gammas
            .gammas()
            .iter()
            .zip(&norms_sq)
            .map(|(&g, &v)| g * g * v)
            .collect();
        let lo = shifted.iter().fold(f64::INFINITY, |a, &b| a.min(b));
        let hi = shifted.iter().fold(0.0f64, |a, &b| a.max(b));
        worst_norm_spread = worst_norm_spread.max((hi - lo) / hi);
        let prod: f64 = gammas.gammas().iter().product();
        worst_gamma_prod = worst_gamma_prod.max((prod - 1.0).abs());
    }
    report.push(
        "minimized_wd_closed_form",
        worst_closed,
        1e-8,
        format!("{n_nets} random norm tuples vs projected-gradient minimizer"),
    );
    report.push(
        "minimized_wd_equal_shifted_norms",
        worst_norm_spread,
        1e-8,
        "optimal shift equalizes every layer norm".into(),
    );
    report.push(
        "optimal_gamma_unit_product",
        worst_gamma_prod,
        1e-12,
        "prod of optimal gammas".into(),
    );

    // 3. ineffective family: closed form for ||·||_{p,q}^q and the
    //    effective factor under doubling one layer
    let mut worst_family = 0.0f64;
    let mut worst_factor = 0.0f64;
    let mut rng = rng::stream(seed, "algebra-family");
    for &(p, q) in &[(1.0, 1.0), (2.0, 2.0), (2.0, 1.0), (3.0, 2.0)] {
        for _ in 0..n_nets.div_ceil(4).max(5) {
            let net = nn::random_mlp(&mut rng, false);
            let g: Vec<f64> = net
                .weights()
                .iter()
                .map(|w| reg::weight_matrix(w.tensor, w.kind).lpq_norm_q(p, q))
                .collect::<Result<_>>()?;
            let (closed, _) = scale_shift::minimized_family(&g, q)?;
            let (numeric, _) = oracles::minimize_shifted_sum(&g, q);
            worst_family = worst_family.max((closed - numeric).abs() / closed);
            let mut doubled = g.clone();
            doubled[0] *= 2.0;
            let (closed2, _) = scale_shift::minimized_family(&doubled, q)?;
            let expected = closed * 2.0f64.powf(1.0 / g.len() as f64);
            worst_factor = worst_factor.max((closed2 - expected).abs() / expected);
        }
    }
    report.push(
        "ineffective_family_closed_form",
        worst_family,
        1e-6,
        "(p,q) in {(1,1),(2,2),(2,1),(3,2)}".into(),
    );
    report.push(
        "effective_factor_two_pow_inv_depth",
        worst_factor,
        1e-10,
        "doubling one layer's g scales the minimum by 2^(1/(L+1))".into(),
    );

    // 4. WEISSI invariance vs wd sensitivity
    let mut worst_weissi = 0.0f64;
    let mut worst_wd_pred = 0.0f64;
    let mut rng = rng::stream(seed, "algebra-weissi");
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-300);
    for _ in 0..n_nets {
        let net = nn::random_mlp(&mut rng, false);
        let shift = ScaleShift::random(&mut rng, net.weights().len(), 1.2);
        let shifted = apply_shift(&net, &shift)?;
        let v = reg::weissi(&net, 1.0, 1.0)?;
        let vs = reg::weissi(&shifted, 1.0, 1.0)?;
        let vl = reg::weissi_log(&net, 1.0, 1.0)?;
        let vls = reg::weissi_log(&shifted, 1.0, 1.0)?;
        worst_weissi = worst_weissi
            .max(rel(v.energy_term, vs.energy_term))
            .max(rel(v.complexity_term, vs.complexity_term))
            .max((vl.energy_term - vls.energy_term).abs() / vl.energy_term.abs().max(1.0))
            .max(rel(vl.complexity_term, vls.complexity_term));
        let predicted: f64 = scale_shift::layer_norms_sq(&net)
            .iter()
            .zip(shift.gammas())
            .map(|(&n, &g)| g * g * n)
            .sum();
        worst_wd_pred = worst_wd_pred.max(rel(reg::wd(&shifted), predicted));
    }
    report.push(
        "weissi_shift_invariance",
        worst_weissi,
        1e-12,
        format!("{n_nets} nets, raw and log variants"),
    );
    report.push(
        "wd_shift_sensitivity_predicted",
        worst_wd_pred,
        1e-10,
        "shifted wd equals sum gamma² ||W||²".into(),
    );

    // 5. canonical form invariance
    let mut worst_canon = 0.0f64;
    let mut rng = rng::stream(seed, "algebra-canon");
    for _ in 0..n_nets.min(30) {
        let net = nn::random_mlp(&mut rng, false);
        let shift = ScaleShift::random(&mut rng, net.weights().len(), 1.2);
        let shifted = apply_shift(&net, &shift)?;
        let c0 = scale_shift::canonicalize(&net, scale_shift::Normalizer::Frobenius)?;
        let c1 = scale_shift::canonicalize(&shifted, scale_shift::Normalizer::Frobenius)?;
        worst_canon = worst_canon.max(rel(c0.energy, c1.energy));
        for (a, b) in c0.normalized_weights.iter().zip(&c1.normalized_weights) {
            worst_canon = worst_canon.max(a.max_abs_diff(b));
        }
    }
    report.push(
        "canonical_form_invariance",
        worst_canon,
        1e-12,
        "canonicalize(shift(net)) == canonicalize(net)".into(),
    );

    // 6. corrupted shifts are rejected
    let bad_product = ScaleShift::new(vec![2.0, 0.7]).is_err();
    let bad_sign = ScaleShift::new(vec![-1.0, -1.0]).is_err();
    report.push_bool(
        "invalid_shift_rejected",
        bad_product && bad_sign,
        "product != 1 and negative factors".into(),
    );

    Ok(report)
}

/// Tape gradients against finite differences, and the analytic regularizer
/// gradients against both the tape and finite differences.
pub fn gradient_suite(seed: u64, n_nets: usize) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("gradients");

    // 1. reverse mode vs central differences through the full loss
    let mut worst_fd = 0.0f64;
    let mut rng = rng::stream(seed, "grad-net");
    for _ in 0..n_nets {
        let mut net = nn::random_mlp(&mut rng, true);
        let d = net.input_dim();
        let x = Tensor::new(
            vec![2, d],
            (0..2 * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )?;
        let labels = vec![
            rng.gen_range(0..net.output_dim()),
            rng.gen_range(0..net.output_dim()),
        ];
        let tape = Tape::new();
        let params = net.stage_params(&tape, true);
        let xv = tape.leaf(x.clone(), false);
        let logits = net.trace(&tape, &params, xv)?;
        let loss = tape.softmax_cross_entropy(logits, &labels, Reduction::Mean)?;
        tape.backward(loss)?;
        let n_params = net.params().len();
        for pi in 0..n_params {
            let grad = tape.grad(params[pi]).expect("param grad");
            let x0 = net.params()[pi].data().to_vec();
            let labels = labels.clone();
            let xc = x.clone();
            let mut f = |v: &[f64]| -> f64 {
                net.params_mut()[pi].data_mut().copy_from_slice(v);
                let t = Tape::new();
                let ps = net.stage_params(&t, false);
                let xv = t.leaf(xc.clone(), false);
                let lg = net.trace(&t, &ps, xv).unwrap();
                let l = t.softmax_cross_entropy(lg, &labels, Reduction::Mean).unwrap();
                let out = t.value(l).item();
                out
            };
            let fd = oracles::finite_difference_gradient(&mut f, &x0, 1e-5);
            net.params_mut()[pi].data_mut().copy_from_slice(&x0);
            worst_fd = worst_fd.max(oracles::max_rel_err_scaled(grad.data(), &fd));
        }
    }
    report.push(
        "tape_vs_finite_differences",
        worst_fd,
        1e-4,
        format!("{n_nets} random nets, h = 1e-5"),
    );

    // 2. analytic reg gradients vs tape autodiff of the same expression
    let mut worst_tape = 0.0f64;
    let mut worst_reg_fd = 0.0f64;
    let mut rng = rng::stream(seed, "grad-reg");
    for _ in 0..n_nets {
        let net = nn::random_mlp(&mut rng, false);
        for cfg in [
            RegularizerConfig::wd(1.0),
            RegularizerConfig::weissi(1.0, 1.0),
            RegularizerConfig::weissi_log(1.0, 1.0),
            RegularizerConfig::lpq(2.0, 1.0, 1.0),
        ] {
            let analytic = reg::reg_grad(&net, &cfg)?;
            let tape = Tape::new();
            let wvars: Vec<_> = net
                .weights()
                .iter()
                .map(|w| (tape.leaf(w.tensor.clone(), true), w.kind))
                .collect();
            let total = reg::reg_on_tape(&tape, &wvars, &cfg)?;
            tape.backward(total)?;
            for ((v, _), a) in wvars.iter().zip(&analytic) {
                let g = tape.grad(*v).expect("weight grad");
                worst_tape = worst_tape.max(oracles::max_rel_err(g.data(), a.data(), 1e-9));
            }
            // finite differences on the first weight layer
            let mut probe = net.clone();
            let pi = net.weight_param_indices()[0];
            let x0 = net.weights()[0].tensor.data().to_vec();
            let mut f = |v: &[f64]| -> f64 {
                probe.params_mut()[pi].data_mut().copy_from_slice(v);
                reg::reg_value(&probe, &cfg).unwrap().total
            };
            let fd = oracles::finite_difference_gradient(&mut f, &x0, 1e-6);
            worst_reg_fd = worst_reg_fd.max(oracles::max_rel_err_scaled(analytic[0].data(), &fd));
        }
    }
    report.push(
        "reg_analytic_vs_tape",
        worst_tape,
        1e-10,
        "wd, weissi, weissi_log, lpq(2,1)".into(),
    );
    report.push(
        "reg_analytic_vs_finite_differences",
        worst_reg_fd,
        1e-4,
        "first weight layer of each net".into(),
    );

    // 3. the energy gradient carries the product of the other layers
    let mut rng = rng::stream(seed, "grad-energy");
    let mut worst_quad = 0.0f64;
    for _ in 0..n_nets.min(10) {
        let mut net = nn::mlp(&[4, 5, 6, 2], false)?;
        net.init(InitScheme::He, rng.gen());
        let cfg = RegularizerConfig::weissi(1.0, 0.0);
        let g0 = reg::reg_grad(&net, &cfg)?;
        if let nn::Layer::Dense { w, .. } = net
            .layers_mut()
            .iter_mut()
            .filter(|l| matches!(l, nn::Layer::Dense { .. }))
            .nth(1)
            .unwrap()
        {
            for v in w.data_mut() {
                *v *= 2.0;
            }
        }
        let g1 = reg::reg_grad(&net, &cfg)?;
        for l in [0usize, 2] {
            let ratio = g1[l].frobenius() / g0[l].frobenius();
            worst_quad = worst_quad.max((ratio - 4.0).abs());
        }
    }
    report.push(
        "energy_gradient_other_layer_product",
        worst_quad,
        1e-9,
        "doubling layer j quadruples the energy gradient of l != j".into(),
    );

    Ok(report)
}

/// Input-gradient bound Monte-Carlo, the two-path gradient agreement, and
/// the residual 2^L expansion identities.
pub fn bounds_suite(seed: u64, trials: usize) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("bounds");

    // 1. per-logit bound never violated over random nets x inputs
    let run_trial = |t: usize| -> Result<(usize, f64)> {
        let mut rng = rng::stream_indexed(seed, "bounds-trial", t as u64);
        let net = nn::random_mlp(&mut rng, false);
        let x = random_input(&mut rng, net.input_dim());
        let mut violations = 0usize;
        let mut max_ratio = 0.0f64;
        for j in 0..net.output_dim() {
            let g = analysis::input_gradient(&net, &x, GradTarget::Logit(j))?;
            let bound = analysis::gradient_bound(&net, j, false)?;
            let norm = g.frobenius();
            if norm > bound + 1e-9 {
                violations += 1;
            }
            if bound > 0.0 {
                max_ratio = max_ratio.max(norm / bound);
            }
        }
        Ok((violations, max_ratio))
    };
    #[cfg(feature = "parallel")]
    let results: Vec<(usize, f64)> = (0..trials).into_par_iter().map(run_trial).collect::<Result<_>>()?;
    #[cfg(not(feature = "parallel"))]
    let results: Vec<(usize, f64)> = (0..trials).map(run_trial).collect::<Result<_>>()?;
    let violations: usize = results.iter().map(|&(v, _)| v).sum();
    let max_ratio = results.iter().map(|&(_, r)| r).fold(0.0, f64::max);
    report.push(
        "input_gradient_bound_violations",
        violations as f64,
        0.0,
        format!("{trials} trials, max measured/bound ratio {max_ratio:.3e}"),
    );

    // 2. equality for the single-linear-layer case
    let mut rng = rng::stream(seed, "bounds-linear");
    let mut worst_eq = 0.0f64;
    for _ in 0..20 {
        let out_dim = rng.gen_range(2..5usize);
        let in_dim = rng.gen_range(2..6usize);
        let mut net = nn::mlp(&[in_dim, out_dim], false)?;
        net.init(InitScheme::He, rng.gen());
        let x = random_input(&mut rng, in_dim);
        for j in 0..out_dim {
            let g = analysis::input_gradient(&net, &x, GradTarget::Logit(j))?;
            let bound = analysis::gradient_bound(&net, j, false)?;
            worst_eq = worst_eq.max((g.frobenius() - bound).abs() / bound.max(1e-300));
        }
    }
    report.push(
        "single_linear_layer_bound_exact",
        worst_eq,
        1e-12,
        "bound equals the gradient norm with no hidden layers".into(),
    );

    // 3. two-path agreement: reverse mode vs explicit gate product
    let mut rng = rng::stream(seed, "bounds-twopath");
    let mut worst_two = 0.0f64;
    for _ in 0..trials.min(100) {
        let net = nn::random_mlp(&mut rng, true);
        let x = random_input(&mut rng, net.input_dim());
        for j in 0..net.output_dim() {
            let a = analysis::input_gradient(&net, &x, GradTarget::Logit(j))?;
            let b = analysis::input_gradient_logit_explicit(&net, &x, j)?;
            worst_two = worst_two.max(a.max_abs_diff(&b));
        }
    }
    report.push(
        "two_path_input_gradient_agreement",
        worst_two,
        1e-10,
        "reverse mode vs explicit J-product".into(),
    );

    // 4. cross-entropy gradient decomposition over logits
    let mut rng = rng::stream(seed, "bounds-ce");
    let mut worst_ce = 0.0f64;
    for _ in 0..trials.min(50) {
        let net = nn::random_mlp(&mut rng, true);
        let x = random_input(&mut rng, net.input_dim());
        let label = rng.gen_range(0..net.output_dim());
        let direct = analysis::input_gradient(&net, &x, GradTarget::CeLoss { label })?;
        let assembled = analysis::input_gradient_ce_assembled(&net, &x, label)?;
        worst_ce = worst_ce.max(direct.max_abs_diff(&assembled));
    }
    report.push(
        "ce_gradient_per_logit_assembly",
        worst_ce,
        1e-10,
        "autodiff CE gradient equals the softmax-weighted logit assembly".into(),
    );

    // 5. residual expansion identity and multipliers for L = 1..=10
    let mut worst_exp = 0.0f64;
    let mut coeff_err = 0.0f64;
    let mut rng = rng::stream(seed, "bounds-res");
    let mut all_bounds_hold = true;
    for depth in 1..=10usize {
        let mut net = nn::residual_chain(4, 4, 5, depth, 2, true, false, false)?;
        net.init(InitScheme::He, rng.gen());
        for layer in net.layers_mut() {
            if let nn::Layer::Residual(b) = layer {
                if matches!(b.shortcut, nn::Shortcut::Identity) {
                    b.agg = nn::Aggregation::convex(rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5));
                }
            }
        }
        let x = random_input(&mut rng, 4);
        let ca = analysis::residual_bound_check(&net, &x, BoundMode::ConvexAggregation)?;
        worst_exp = worst_exp.max(ca.expansion_max_abs_diff);
        coeff_err = coeff_err.max((ca.coefficient_sum - 1.0).abs());
        all_bounds_hold &= ca.bound_satisfied;
        let std = analysis::residual_bound_check(&net, &x, BoundMode::Standard)?;
        worst_exp = worst_exp.max(std.expansion_max_abs_diff);
        coeff_err = coeff_err.max((std.coefficient_sum - (1u64 << depth) as f64).abs());
        all_bounds_hold &= std.bound_satisfied;
    }
    report.push(
        "residual_expansion_agreement",
        worst_exp,
        1e-10,
        "direct product vs 2^L-term expansion, L = 1..=10".into(),
    );
    report.push(
        "aggregation_multiplier_exact",
        coeff_err,
        0.0,
        "prod(alpha+beta): 1 convex, 2^L standard".into(),
    );
    report.push_bool(
        "residual_norm_bounds_hold",
        all_bounds_hold,
        "||R_L|| within the mode's sigma multiple".into(),
    );

    // 6. the input gradient is shift-invariant (identical function)
    let mut rng = rng::stream(seed, "bounds-shift");
    let mut worst_shift = 0.0f64;
    for _ in 0..trials.min(50) {
        let net = nn::random_mlp(&mut rng, true);
        let shift = ScaleShift::random(&mut rng, net.weights().len(), 1.0);
        let shifted = apply_shift(&net, &shift)?;
        let x = random_input(&mut rng, net.input_dim());
        for j in 0..net.output_dim() {
            let a = analysis::input_gradient(&net, &x, GradTarget::Logit(j))?;
            let b = analysis::input_gradient(&shifted, &x, GradTarget::Logit(j))?;
            worst_shift = worst_shift.max(a.max_abs_diff(&b));
        }
    }
    report.push(
        "input_gradient_shift_invariance",
        worst_shift,
        1e-9,
        "gradients of equivalent networks agree".into(),
    );

    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Algebra,
    Gradients,
    Bounds,
    All,
}

/// Run the requested suites with sizes scaled by `trials`.
pub fn run(suite: Suite, seed: u64, trials: usize) -> Result<Vec<SuiteReport>> {
    let mut out = Vec::new();
    let nets = trials.clamp(10, 100);
    if matches!(suite, Suite::Algebra | Suite::All) {
        out.push(algebra_suite(seed, nets, 10, 20)?);
    }
    if matches!(suite, Suite::Gradients | Suite::All) {
        out.push(gradient_suite(seed, nets.min(8))?);
    }
    if matches!(suite, Suite::Bounds | Suite::All) {
        out.push(bounds_suite(seed, trials)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn algebra_suite_passes_smoke() {
        let rep = algebra_suite(3, 8, 4, 8).unwrap();
        assert!(rep.passed, "{rep:#?}");
    }

    #[test]
    fn gradient_suite_passes_smoke() {
        let rep = gradient_suite(4, 2).unwrap();
        assert!(rep.passed, "{rep:#?}");
    }

    #[test]
    fn bounds_suite_passes_smoke() {
        let rep = bounds_suite(5, 25).unwrap();
        assert!(rep.passed, "{rep:#?}");
    }
}
