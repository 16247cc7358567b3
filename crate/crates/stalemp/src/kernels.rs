//! Shared raw numeric kernels over flat row-major `f64` slices.
//!
//! Both the tape ops and the no-tape oracle forward call these, which is what
//! makes a whole-graph batched forward bit-identical to the oracle: same loops,
//! same accumulation order. Inner sums always run in index order; parallelism
//! only distributes disjoint output rows.

use crate::par;

/// `a` is m x k, `b` is k x n; returns a*b (m x n).
pub fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    par::for_each_row(&mut out, n.max(1), |i, row| {
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
    out
}

/// `a` is m x k, `b` is n x k; returns a*b^T (m x n), out[i][j] = dot(a_i, b_j).
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![0.0; m * n];
    par::for_each_row(&mut out, n.max(1), |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (av, bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o = acc;
        }
    });
    out
}

/// `a` is m x k, `b` is m x n; returns a^T*b (k x n), out[t][j] = sum_i a[i][t]*b[i][j].
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    let mut out = vec![0.0; k * n];
    par::for_each_row(&mut out, n.max(1), |t, row| {
        for i in 0..m {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let brow = &b[i * n..(i + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn sum_sq(a: &[f64]) -> f64 {
    let mut acc = 0.0;
    for x in a {
        acc += x * x;
    }
    acc
}

pub fn norm2(a: &[f64]) -> f64 {
    sum_sq(a).sqrt()
}

pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

/// Subgradient at 0 is the slope by convention.
pub fn leaky_relu_grad(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        slope
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

pub fn elu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// In-place max-subtracted softmax over `[offsets[s], offsets[s+1])` ranges.
/// Empty segments are untouched; nonempty ones end up summing to 1.
pub fn softmax_segments(scores: &mut [f64], offsets: &[usize]) {
    debug_assert!(!offsets.is_empty());
    debug_assert_eq!(*offsets.last().unwrap(), scores.len());
    let nseg = offsets.len() - 1;
    // Segments are disjoint slices; split sequentially, run each segment's
    // normalization independently.
    let mut segs: Vec<&mut [f64]> = Vec::with_capacity(nseg);
    let mut rest = scores;
    let mut prev = 0;
    for s in 0..nseg {
        let len = offsets[s + 1] - offsets[s];
        debug_assert_eq!(offsets[s], prev);
        prev = offsets[s + 1];
        let (head, tail) = rest.split_at_mut(len);
        segs.push(head);
        rest = tail;
    }
    let apply = |seg: &mut [f64]| {
        if seg.is_empty() {
            return;
        }
        let mut mx = f64::NEG_INFINITY;
        for v in seg.iter() {
            if *v > mx {
                mx = *v;
            }
        }
        let mut z = 0.0;
        for v in seg.iter_mut() {
            *v = (*v - mx).exp();
            z += *v;
        }
        for v in seg.iter_mut() {
            *v /= z;
        }
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        segs.par_iter_mut().with_min_len(32).for_each(|s| apply(s));
    }
    #[cfg(not(feature = "parallel"))]
    {
        segs.iter_mut().for_each(|s| apply(s));
    }
}

/// Weighted neighbor sum: for each target segment s,
/// out[s] = sum over edges e in [offsets[s], offsets[s+1]) of alpha[e] * rows[idx[e]].
/// `rows` is r x width; out is (offsets.len()-1) x width.
pub fn attend(
    alpha: &[f64],
    rows: &[f64],
    idx: &[usize],
    offsets: &[usize],
    width: usize,
) -> Vec<f64> {
    debug_assert_eq!(alpha.len(), idx.len());
    debug_assert_eq!(*offsets.last().unwrap(), idx.len());
    let nseg = offsets.len() - 1;
    let mut out = vec![0.0; nseg * width];
    par::for_each_row(&mut out, width.max(1), |s, orow| {
        for e in offsets[s]..offsets[s + 1] {
            let w = alpha[e];
            let rrow = &rows[idx[e] * width..(idx[e] + 1) * width];
            for (o, rv) in orow.iter_mut().zip(rrow) {
                *o += w * rv;
            }
        }
    });
    out
}

/// Row gather: out[i] = src[idx[i]], rows of `width`.
pub fn gather_rows(src: &[f64], idx: &[usize], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; idx.len() * width];
    par::for_each_row(&mut out, width.max(1), |i, row| {
        row.copy_from_slice(&src[idx[i] * width..(idx[i] + 1) * width]);
    });
    out
}

/// log(sum(exp(row))) with max subtraction.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let mut mx = f64::NEG_INFINITY;
    for v in row {
        if *v > mx {
            mx = *v;
        }
    }
    let mut z = 0.0;
    for v in row {
        z += (*v - mx).exp();
    }
    mx + z.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        // Independent i-j-k oracle against the kernel's i-k-j accumulation.
        let m = 3;
        let k = 4;
        let n = 2;
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.61).cos()).collect();
        let got = matmul_nn(&a, &b, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let mut want = 0.0;
                for t in 0..k {
                    want += a[i * k + t] * b[t * n + j];
                }
                assert!((got[i * n + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transposed_matmuls_agree_with_explicit_transpose() {
        let m = 4;
        let k = 3;
        let n = 5;
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64).sqrt() - 1.5).collect();
        let b: Vec<f64> = (0..m * n).map(|i| 0.1 * i as f64 - 0.7).collect();
        let at: Vec<f64> = (0..k * m).map(|p| a[(p % m) * k + p / m]).collect();
        let want = matmul_nn(&at, &b, k, m, n);
        let got = matmul_tn(&a, &b, m, k, n);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }

        let c: Vec<f64> = (0..n * k).map(|i| (i as f64 * 0.21).sin()).collect();
        let ct: Vec<f64> = (0..k * n).map(|p| c[(p % n) * k + p / n]).collect();
        let want = matmul_nn(&a, &ct, m, k, n);
        let got = matmul_nt(&a, &c, m, k, n);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_of_two() {
        // 1/(1+e^-2) evaluated directly.
        let want = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((sigmoid(2.0) - want).abs() < 1e-15);
        assert!((sigmoid(2.0) - 0.880797).abs() < 1e-6);
    }

    #[test]
    fn softmax_segment_basics() {
        // Scores (0, ln 3) -> (0.25, 0.75); empty segment untouched; sums hit 1.
        let mut s = vec![0.0, 3.0f64.ln(), 5.0];
        let offs = vec![0, 2, 2, 3];
        softmax_segments(&mut s, &offs);
        assert!((s[0] - 0.25).abs() < 1e-12);
        assert!((s[1] - 0.75).abs() < 1e-12);
        assert!((s[2] - 1.0).abs() < 1e-12);
        assert!((s[0] + s[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance() {
        let base = vec![0.3, -1.2, 2.0, 0.0];
        let offs = vec![0, 4];
        let mut a = base.clone();
        softmax_segments(&mut a, &offs);
        let mut b: Vec<f64> = base.iter().map(|v| v + 100.0).collect();
        softmax_segments(&mut b, &offs);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn attend_sums_weighted_rows() {
        let rows = vec![1.0, 0.0, 0.0, 2.0, 3.0, 1.0];
        let alpha = vec![0.25, 0.75, 1.0];
        let idx = vec![0, 2, 1];
        let offs = vec![0, 2, 2, 3];
        let out = attend(&alpha, &rows, &idx, &offs, 2);
        assert!((out[0] - (0.25 * 1.0 + 0.75 * 3.0)).abs() < 1e-12);
        assert!((out[1] - (0.25 * 0.0 + 0.75 * 1.0)).abs() < 1e-12);
        assert_eq!(out[2], 0.0);
        assert_eq!(out[3], 0.0);
        assert!((out[4] - 0.0).abs() < 1e-12);
        assert!((out[5] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn elu_and_softplus_shapes() {
        assert_eq!(elu(0.0), 0.0);
        assert!(elu(-30.0) > -1.0);
        assert!((elu(1.5) - 1.5).abs() == 0.0);
        assert!((softplus(0.0) - 2.0f64.ln()).abs() < 1e-15);
        // softplus stays finite and positive far into both tails
        assert!(softplus(-700.0) >= 0.0);
        assert!(softplus(700.0).is_finite());
    }
}
