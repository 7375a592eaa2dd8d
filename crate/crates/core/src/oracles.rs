//! Independent verification routes: finite differences, black-box
//! constrained minimization over scale shifts, the unrolled convolution
//! matrix, and the 2^L residual expansion.
//!
//! Nothing here shares code with the implementations it is used to check;
//! the `verify` suites and the test code lean on that independence.

use crate::error::Result;
use crate::tensor::Tensor;

/// Central finite differences of a scalar function at `x`.
pub fn finite_difference_gradient(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + h;
        let fp = f(&xp);
        xp[i] = orig - h;
        let fm = f(&xp);
        xp[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Largest relative deviation between two gradient vectors, with an absolute
/// floor so near-zero entries do not blow the ratio up.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Like [`max_rel_err`] with the floor tied to the gradient's own scale:
/// entries three orders below the largest one sit inside finite-difference
/// cancellation noise and are compared against that scale instead.
pub fn max_rel_err_scaled(a: &[f64], b: &[f64]) -> f64 {
    let scale = a
        .iter()
        .chain(b)
        .fold(0.0f64, |m, &v| m.max(v.abs()))
        .max(1e-12);
    max_rel_err(a, b, 1e-3 * scale)
}

/// Minimize sum_l c_l * exp(p * u_l) subject to sum(u) = 0 by projected
/// gradient descent with backtracking, starting at u = 0. Returns
/// (min value, gammas = exp(u)).
///
/// This is the black-box route for checking the closed-form minimized
/// regularizers: it never looks at the stationarity structure.
pub fn minimize_shifted_sum(c: &[f64], p: f64) -> (f64, Vec<f64>) {
    let n = c.len();
    let f = |u: &[f64]| -> f64 { u.iter().zip(c).map(|(&ui, &ci)| ci * (p * ui).exp()).sum() };
    let mut u = vec![0.0; n];
    let mut fu = f(&u);
    let mut step = 0.1;
    for _ in 0..20_000 {
        // gradient, projected onto the sum-zero hyperplane
        let mut grad: Vec<f64> = u
            .iter()
            .zip(c)
            .map(|(&ui, &ci)| p * ci * (p * ui).exp())
            .collect();
        let mean = grad.iter().sum::<f64>() / n as f64;
        for gi in &mut grad {
            *gi -= mean;
        }
        let gnorm: f64 = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if gnorm < 1e-14 * (1.0 + fu.abs()) {
            break;
        }
        // backtracking line search
        let mut tried = 0;
        loop {
            let cand: Vec<f64> = u.iter().zip(&grad).map(|(&ui, &gi)| ui - step * gi).collect();
            let fc = f(&cand);
            if fc < fu {
                u = cand;
                fu = fc;
                step *= 1.5;
                break;
            }
            step *= 0.5;
            tried += 1;
            if tried > 60 {
                return (fu, u.iter().map(|&ui| ui.exp()).collect());
            }
        }
    }
    (fu, u.iter().map(|&ui| ui.exp()).collect())
}

/// Iteratively-refined grid search for the same problem, used as a second
/// independent confirmation on small instances (n - 1 free coordinates).
pub fn grid_minimize_shifted_sum(c: &[f64], p: f64, rounds: usize) -> f64 {
    let n = c.len();
    assert!(n >= 2);
    let free = n - 1;
    let mut center = vec![0.0; free];
    let mut half_width: f64 = 2.0;
    let mut best = f64::INFINITY;
    let pts = 9usize;
    for _ in 0..rounds {
        let mut best_u = center.clone();
        let mut idx = vec![0usize; free];
        loop {
            let u: Vec<f64> = idx
                .iter()
                .zip(&center)
                .map(|(&i, &c0)| c0 - half_width + 2.0 * half_width * i as f64 / (pts - 1) as f64)
                .collect();
            let last = -u.iter().sum::<f64>();
            let mut val = c[free] * (p * last).exp();
            for l in 0..free {
                val += c[l] * (p * u[l]).exp();
            }
            if val < best {
                best = val;
                best_u = u.clone();
            }
            // odometer increment
            let mut d = 0;
            loop {
                idx[d] += 1;
                if idx[d] < pts {
                    break;
                }
                idx[d] = 0;
                d += 1;
                if d == free {
                    break;
                }
            }
            if d == free {
                break;
            }
        }
        center = best_u;
        half_width *= 0.35;
    }
    best
}

/// Zero-pad a [C,H,W] input on its spatial dims.
pub fn pad_spatial(x: &Tensor, padding: usize) -> Result<Tensor> {
    let s = x.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let (hp, wp) = (h + 2 * padding, w + 2 * padding);
    let mut out = vec![0.0; c * hp * wp];
    for ci in 0..c {
        for r in 0..h {
            for q in 0..w {
                out[(ci * hp + r + padding) * wp + q + padding] = x.data()[(ci * h + r) * w + q];
            }
        }
    }
    Tensor::new(vec![c, hp, wp], out)
}

/// Build the sparse matrix view of a convolution: a dense
/// [C_out·H'·W' x C_in·Hp·Wp] matrix M such that conv(x) flattened equals
/// M · flatten(pad(x)). Kernel layout [k,k,C_in,C_out].
pub fn unrolled_conv_matrix(
    kernel: &Tensor,
    in_channels: usize,
    h: usize,
    w: usize,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let ks = kernel.shape()[0];
    let c_out = kernel.shape()[3];
    let (hp, wp) = (h + 2 * padding, w + 2 * padding);
    let oh = (hp - ks) / stride + 1;
    let ow = (wp - ks) / stride + 1;
    let rows = c_out * oh * ow;
    let cols = in_channels * hp * wp;
    let mut m = vec![0.0; rows * cols];
    for co in 0..c_out {
        for r in 0..oh {
            for q in 0..ow {
                let row = (co * oh + r) * ow + q;
                for kr in 0..ks {
                    for kq in 0..ks {
                        for ci in 0..in_channels {
                            let col = (ci * hp + r * stride + kr) * wp + q * stride + kq;
                            m[row * cols + col] = kernel.data()[((kr * ks + kq) * in_channels + ci) * c_out + co];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![rows, cols], m)
}

/// Expand prod_l (alpha_l I + beta_l D_l) into its 2^L subset sum, keeping
/// factor order. Returns (sum of all terms, per-subset coefficient·norm data
/// as (coefficient, frobenius norm of the D-product) for the sigma bound).
pub fn residual_expansion(alphas: &[f64], betas: &[f64], d: &[Tensor]) -> (Tensor, Vec<(f64, f64)>) {
    let depth = d.len();
    assert!(depth <= 20, "expansion is 2^L terms");
    let dim = if depth == 0 { 1 } else { d[0].rows() };
    let mut total = Tensor::zeros(&[dim, dim]);
    let mut terms = Vec::with_capacity(1 << depth);
    for mask in 0u32..(1u32 << depth) {
        let mut coef = 1.0;
        let mut prod = Tensor::eye(dim);
        for l in 0..depth {
            if mask & (1 << l) != 0 {
                coef *= betas[l];
                prod = prod.matmul(&d[l]).expect("square chain");
            } else {
                coef *= alphas[l];
            }
        }
        let norm = prod.frobenius();
        for (t, p) in total.data_mut().iter_mut().zip(prod.data()) {
            *t += coef * p;
        }
        terms.push((coef, norm));
    }
    (total, terms)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_gradient_of_quadratic() {
        let mut f = |x: &[f64]| x.iter().map(|&v| v * v).sum::<f64>();
        let g = finite_difference_gradient(&mut f, &[1.0, 2.0, 3.0], 1e-5);
        let want = [2.0, 4.0, 6.0];
        assert!(max_rel_err(&g, &want, 1e-8) < 1e-8);
    }

    #[test]
    fn shifted_sum_minimizer_matches_am_gm() {
        // min sum c_l e^{2 u_l} with sum u = 0 is (L+1)(prod c)^(1/(L+1))
        let c = [9.0, 4.0, 1.0];
        let (val, gammas) = minimize_shifted_sum(&c, 2.0);
        let closed = 3.0 * (36.0f64).powf(1.0 / 3.0);
        assert!((val - closed).abs() / closed < 1e-10, "{val} vs {closed}");
        let prod: f64 = gammas.iter().product();
        assert!((prod - 1.0).abs() < 1e-9);
        let grid = grid_minimize_shifted_sum(&c, 2.0, 24);
        assert!((grid - closed).abs() / closed < 1e-8, "{grid} vs {closed}");
    }

    #[test]
    fn expansion_of_single_block() {
        let d1 = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let (sum, terms) = residual_expansion(&[0.25], &[0.75], &[d1.clone()]);
        assert_eq!(terms.len(), 2);
        let want = Tensor::eye(2).scale(0.25).add(&d1.scale(0.75)).unwrap();
        assert!(sum.max_abs_diff(&want) < 1e-15);
    }
}
