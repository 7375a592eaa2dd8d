//! Dense math kernels: sequential implementations plus rayon-parallel
//! variants behind the `parallel` feature.
//!
//! Determinism contract: for every kernel the reduction order of each output
//! element is fixed and independent of the thread count, so the parallel and
//! sequential variants produce bit-identical results. Parallelism only ever
//! splits work across *independent* output rows.
//!
//! All matmul kernels accumulate (`out +=`), which is what the backward pass
//! wants; forward callers pass a zeroed buffer.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many madds the rayon dispatch overhead is not worth paying.
#[cfg(feature = "parallel")]
const PAR_MIN_MADDS: usize = 1 << 15;

/// Fixed-order dot product: eight interleaved lanes, combined in a fixed
/// tree, then a scalar tail. Vectorizes to FMA without changing the result
/// between runs.
#[inline]
pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let n = x.len();
    let chunks = n / 8;
    let mut acc = [0.0f64; 8];
    for c in 0..chunks {
        let xb = &x[c * 8..c * 8 + 8];
        let yb = &y[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] = xb[l].mul_add(yb[l], acc[l]);
        }
    }
    let mut tail = 0.0;
    for t in chunks * 8..n {
        tail = x[t].mul_add(y[t], tail);
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// out[i,:] += sum_k a[i,k] * b[k,:] for the given row range of `a`/`out`.
fn matmul_rows(a: &[f64], b: &[f64], out: &mut [f64], rows: std::ops::Range<usize>, k: usize, n: usize) {
    let row0 = rows.start;
    for i in rows {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut out[(i - row0) * n..(i - row0 + 1) * n];
        let mut kk = 0;
        while kk + 4 <= k {
            let a0 = arow[kk];
            let a1 = arow[kk + 1];
            let a2 = arow[kk + 2];
            let a3 = arow[kk + 3];
            let b0 = &b[kk * n..kk * n + n];
            let b1 = &b[(kk + 1) * n..(kk + 1) * n + n];
            let b2 = &b[(kk + 2) * n..(kk + 2) * n + n];
            let b3 = &b[(kk + 3) * n..(kk + 3) * n + n];
            for j in 0..n {
                crow[j] = a3.mul_add(
                    b3[j],
                    a2.mul_add(b2[j], a1.mul_add(b1[j], a0.mul_add(b0[j], crow[j]))),
                );
            }
            kk += 4;
        }
        while kk < k {
            let av = arow[kk];
            let brow = &b[kk * n..kk * n + n];
            for j in 0..n {
                crow[j] = av.mul_add(brow[j], crow[j]);
            }
            kk += 1;
        }
    }
}

/// C[m,n] += A[m,k] · B[k,n], sequential.
pub fn matmul_seq(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    matmul_rows(a, b, out, 0..m, k, n);
}

/// C[m,n] += A[m,k] · B[k,n], rayon over row blocks. Bit-identical to
/// [`matmul_seq`].
#[cfg(feature = "parallel")]
pub fn matmul_par(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let rows_per = rows_per_chunk(m);
    out.par_chunks_mut(rows_per * n)
        .enumerate()
        .for_each(|(c, chunk)| {
            let lo = c * rows_per;
            let hi = (lo + chunk.len() / n).min(m);
            matmul_rows(a, b, chunk, lo..hi, k, n);
        });
}

/// C[m,n] += A[m,k] · B[k,n], dispatching on the feature and problem size.
pub fn matmul(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    #[cfg(feature = "parallel")]
    {
        if m * k * n >= PAR_MIN_MADDS && m > 1 {
            matmul_par(a, b, out, m, k, n);
            return;
        }
    }
    matmul_seq(a, b, out, m, k, n);
}

/// out[i,p] += dot(a[i,:], b[p,:]): A · Bᵀ with B stored row-major [p,k].
/// Four B rows share each pass over the A row; per-output reduction order
/// (eight lanes, fixed combine tree, scalar tail) is identical in every
/// variant of this kernel.
fn matmul_nt_rows(a: &[f64], b: &[f64], out: &mut [f64], rows: std::ops::Range<usize>, k: usize, p: usize) {
    let row0 = rows.start;
    let chunks = k / 8;
    let fold = |acc: &[f64; 8]| -> f64 {
        ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]))
    };
    for i in rows {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut out[(i - row0) * p..(i - row0 + 1) * p];
        let mut j = 0;
        while j + 4 <= p {
            let b0 = &b[j * k..(j + 1) * k];
            let b1 = &b[(j + 1) * k..(j + 2) * k];
            let b2 = &b[(j + 2) * k..(j + 3) * k];
            let b3 = &b[(j + 3) * k..(j + 4) * k];
            let mut acc0 = [0.0f64; 8];
            let mut acc1 = [0.0f64; 8];
            let mut acc2 = [0.0f64; 8];
            let mut acc3 = [0.0f64; 8];
            for c in 0..chunks {
                let xb = &arow[c * 8..c * 8 + 8];
                let y0 = &b0[c * 8..c * 8 + 8];
                let y1 = &b1[c * 8..c * 8 + 8];
                let y2 = &b2[c * 8..c * 8 + 8];
                let y3 = &b3[c * 8..c * 8 + 8];
                for l in 0..8 {
                    acc0[l] = xb[l].mul_add(y0[l], acc0[l]);
                    acc1[l] = xb[l].mul_add(y1[l], acc1[l]);
                    acc2[l] = xb[l].mul_add(y2[l], acc2[l]);
                    acc3[l] = xb[l].mul_add(y3[l], acc3[l]);
                }
            }
            let mut tails = [0.0f64; 4];
            for t in chunks * 8..k {
                tails[0] = arow[t].mul_add(b0[t], tails[0]);
                tails[1] = arow[t].mul_add(b1[t], tails[1]);
                tails[2] = arow[t].mul_add(b2[t], tails[2]);
                tails[3] = arow[t].mul_add(b3[t], tails[3]);
            }
            crow[j] += fold(&acc0) + tails[0];
            crow[j + 1] += fold(&acc1) + tails[1];
            crow[j + 2] += fold(&acc2) + tails[2];
            crow[j + 3] += fold(&acc3) + tails[3];
            j += 4;
        }
        while j < p {
            crow[j] += dot(arow, &b[j * k..(j + 1) * k]);
            j += 1;
        }
    }
}

/// C[m,p] += A[m,k] · B[p,k]ᵀ, sequential.
pub fn matmul_nt_seq(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, p: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), p * k);
    debug_assert_eq!(out.len(), m * p);
    matmul_nt_rows(a, b, out, 0..m, k, p);
}

/// C[m,p] += A[m,k] · B[p,k]ᵀ, rayon over row blocks.
#[cfg(feature = "parallel")]
pub fn matmul_nt_par(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, p: usize) {
    let rows_per = rows_per_chunk(m);
    out.par_chunks_mut(rows_per * p)
        .enumerate()
        .for_each(|(c, chunk)| {
            let lo = c * rows_per;
            let hi = (lo + chunk.len() / p).min(m);
            matmul_nt_rows(a, b, chunk, lo..hi, k, p);
        });
}

/// C[m,p] += A[m,k] · B[p,k]ᵀ, dispatching.
pub fn matmul_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, p: usize) {
    #[cfg(feature = "parallel")]
    {
        if m * k * p >= PAR_MIN_MADDS && m > 1 {
            matmul_nt_par(a, b, out, m, k, p);
            return;
        }
    }
    matmul_nt_seq(a, b, out, m, k, p);
}

/// out[p,:] += sum_i a[i,p] * b[i,:] for a block of p rows.
/// Four-row blocking keeps the C block hot while streaming B once.
fn matmul_tn_rows(a: &[f64], b: &[f64], out: &mut [f64], prows: std::ops::Range<usize>, m: usize, k: usize, n: usize) {
    let p0 = prows.start;
    let mut p = prows.start;
    while p + 4 <= prows.end {
        let base = (p - p0) * n;
        for i in 0..m {
            let brow = &b[i * n..(i + 1) * n];
            let a0 = a[i * k + p];
            let a1 = a[i * k + p + 1];
            let a2 = a[i * k + p + 2];
            let a3 = a[i * k + p + 3];
            let (c0, rest) = out[base..base + 4 * n].split_at_mut(n);
            let (c1, rest) = rest.split_at_mut(n);
            let (c2, c3) = rest.split_at_mut(n);
            for j in 0..n {
                c0[j] = a0.mul_add(brow[j], c0[j]);
                c1[j] = a1.mul_add(brow[j], c1[j]);
                c2[j] = a2.mul_add(brow[j], c2[j]);
                c3[j] = a3.mul_add(brow[j], c3[j]);
            }
        }
        p += 4;
    }
    while p < prows.end {
        let crow = &mut out[(p - p0) * n..(p - p0 + 1) * n];
        for i in 0..m {
            let av = a[i * k + p];
            let brow = &b[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] = av.mul_add(brow[j], crow[j]);
            }
        }
        p += 1;
    }
}

/// C[k,n] += A[m,k]ᵀ · B[m,n], sequential.
pub fn matmul_tn_seq(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    matmul_tn_rows(a, b, out, 0..k, m, k, n);
}

/// C[k,n] += A[m,k]ᵀ · B[m,n], rayon over blocks of output rows.
#[cfg(feature = "parallel")]
pub fn matmul_tn_par(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let rows_per = rows_per_chunk(k).next_multiple_of(4);
    out.par_chunks_mut(rows_per * n)
        .enumerate()
        .for_each(|(c, chunk)| {
            let lo = c * rows_per;
            let hi = (lo + chunk.len() / n).min(k);
            matmul_tn_rows(a, b, chunk, lo..hi, m, k, n);
        });
}

/// C[k,n] += A[m,k]ᵀ · B[m,n], dispatching.
pub fn matmul_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    #[cfg(feature = "parallel")]
    {
        if m * k * n >= PAR_MIN_MADDS && k > 4 {
            matmul_tn_par(a, b, out, m, k, n);
            return;
        }
    }
    matmul_tn_seq(a, b, out, m, k, n);
}

#[cfg(feature = "parallel")]
fn rows_per_chunk(total_rows: usize) -> usize {
    let threads = rayon::current_num_threads().max(1);
    total_rows.div_ceil(threads).max(1)
}

/// Map a slice through `f` into a fresh Vec, splitting across threads when
/// available. Elementwise, so ordering is irrelevant to the result.
pub fn map_elementwise(x: &[f64], f: impl Fn(f64) -> f64 + Sync) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    {
        if x.len() >= PAR_MIN_MADDS {
            return x.par_iter().map(|&v| f(v)).collect();
        }
    }
    x.iter().map(|&v| f(v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for t in 0..k {
                    s += a[i * k + t] * b[t * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    fn rand_mat(rng: &mut ChaCha12Rng, len: usize) -> Vec<f64> {
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn matmul_matches_naive() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        for &(m, k, n) in &[(1, 1, 1), (3, 5, 4), (7, 13, 9), (16, 32, 8)] {
            let a = rand_mat(&mut rng, m * k);
            let b = rand_mat(&mut rng, k * n);
            let mut c = vec![0.0; m * n];
            matmul_seq(&a, &b, &mut c, m, k, n);
            let r = naive(&a, &b, m, k, n);
            for (x, y) in c.iter().zip(&r) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn nt_and_tn_match_naive_with_transposes() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let (m, k, p) = (6, 11, 5);
        let a = rand_mat(&mut rng, m * k);
        let b = rand_mat(&mut rng, p * k);
        // A·Bᵀ
        let mut bt = vec![0.0; k * p];
        for i in 0..p {
            for j in 0..k {
                bt[j * p + i] = b[i * k + j];
            }
        }
        let want = naive(&a, &bt, m, k, p);
        let mut c = vec![0.0; m * p];
        matmul_nt_seq(&a, &b, &mut c, m, k, p);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
        // Aᵀ·B with B [m,n]
        let n = 7;
        let b2 = rand_mat(&mut rng, m * n);
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for j in 0..k {
                at[j * m + i] = a[i * k + j];
            }
        }
        let want = naive(&at, &b2, k, m, n);
        let mut c = vec![0.0; k * n];
        matmul_tn_seq(&a, &b2, &mut c, m, k, n);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_kernels_bitwise_equal_sequential() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let (m, k, n) = (33, 57, 41);
        let a = rand_mat(&mut rng, m * k);
        let b = rand_mat(&mut rng, k * n);
        let mut cs = vec![0.0; m * n];
        let mut cp = vec![0.0; m * n];
        matmul_seq(&a, &b, &mut cs, m, k, n);
        matmul_par(&a, &b, &mut cp, m, k, n);
        assert_eq!(cs, cp);

        let b2 = rand_mat(&mut rng, n * k);
        let mut cs = vec![0.0; m * n];
        let mut cp = vec![0.0; m * n];
        matmul_nt_seq(&a, &b2, &mut cs, m, k, n);
        matmul_nt_par(&a, &b2, &mut cp, m, k, n);
        assert_eq!(cs, cp);

        let b3 = rand_mat(&mut rng, m * n);
        let mut cs = vec![0.0; k * n];
        let mut cp = vec![0.0; k * n];
        matmul_tn_seq(&a, &b3, &mut cs, m, k, n);
        matmul_tn_par(&a, &b3, &mut cp, m, k, n);
        assert_eq!(cs, cp);
    }

    #[test]
    fn kernels_accumulate() {
        let a = [1.0, 0.0, 0.0, 1.0];
        let b = [2.0, 0.0, 0.0, 2.0];
        let mut c = vec![1.0; 4];
        matmul_seq(&a, &b, &mut c, 2, 2, 2);
        assert_eq!(c, vec![3.0, 1.0, 1.0, 3.0]);
    }
}
