//! Windowed scaled dot-product attention kernel.
//!
//! Row `i` only scores the keys in [`local_window`]`(i, n, k)`; the softmax is
//! normalized over that window alone, so every weight outside it is exactly
//! zero and never stored. Memory is `O(n k)` instead of `O(n^2)`.

use alloc::vec;
use alloc::vec::Vec;

/// Inclusive 0-based window `[max(0, i - k/2), min(n - 1, i + k/2)]`.
///
/// For even `k` this covers `k + 1` positions, which is what the summation
/// bounds `j = i - floor(k/2) ..= i + floor(k/2)` describe.
pub fn local_window(i: usize, n: usize, k: usize) -> (usize, usize) {
    debug_assert!(i < n);
    let half = k / 2;
    (i.saturating_sub(half), (i + half).min(n - 1))
}

/// Total number of `(i, j)` pairs scored by a length-`n` sequence.
pub fn attended_pairs(n: usize, k: usize) -> usize {
    (0..n)
        .map(|i| {
            let (lo, hi) = local_window(i, n, k);
            hi - lo + 1
        })
        .sum()
}

/// Row-wise sparse attention weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseAttention {
    n: usize,
    starts: Vec<usize>,
    offsets: Vec<usize>,
    weights: Vec<f64>,
}

impl SparseAttention {
    /// Computes `softmax_j(q_i . k_j * scale)` over each row's window.
    ///
    /// `q` and `k` are row-major `n x d`.
    pub fn compute(q: &[f64], k: &[f64], n: usize, d: usize, window: usize, scale: f64) -> Self {
        let mut starts = Vec::with_capacity(n);
        let mut offsets = Vec::with_capacity(n + 1);
        let mut weights = Vec::with_capacity(n * (window + 1));
        offsets.push(0);
        for i in 0..n {
            let (lo, hi) = local_window(i, n, window);
            let qi = &q[i * d..(i + 1) * d];
            let base = weights.len();
            let mut max = f64::NEG_INFINITY;
            for j in lo..=hi {
                let kj = &k[j * d..(j + 1) * d];
                let e = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                max = max.max(e);
                weights.push(e);
            }
            let mut total = 0.0;
            for w in &mut weights[base..] {
                *w = libm::exp(*w - max);
                total += *w;
            }
            for w in &mut weights[base..] {
                *w /= total;
            }
            starts.push(lo);
            offsets.push(weights.len());
        }
        Self {
            n,
            starts,
            offsets,
            weights,
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Window start and weights for row `i`.
    pub fn row(&self, i: usize) -> (usize, &[f64]) {
        (self.starts[i], &self.weights[self.offsets[i]..self.offsets[i + 1]])
    }

    pub fn pair_count(&self) -> usize {
        self.weights.len()
    }

    /// Dense `n x n` weight matrix, zeros outside every window.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n * self.n];
        for i in 0..self.n {
            let (lo, w) = self.row(i);
            out[i * self.n + lo..i * self.n + lo + w.len()].copy_from_slice(w);
        }
        out
    }

    /// `a_i = sum_j alpha_ij v_j` with `v` row-major `n x dv`.
    pub fn apply(&self, v: &[f64], dv: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n * dv];
        for i in 0..self.n {
            let (lo, w) = self.row(i);
            let o = &mut out[i * dv..(i + 1) * dv];
            for (t, &a) in w.iter().enumerate() {
                let vj = &v[(lo + t) * dv..(lo + t + 1) * dv];
                for (x, &y) in o.iter_mut().zip(vj) {
                    *x += a * y;
                }
            }
        }
        out
    }

    /// Gradients of `A = alpha(QK^T * scale) V` given `dA`.
    pub(crate) fn backward(
        &self,
        q: &[f64],
        k: &[f64],
        v: &[f64],
        d: usize,
        dv: usize,
        scale: f64,
        grad: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = self.n;
        let mut gq = vec![0.0; n * d];
        let mut gk = vec![0.0; n * d];
        let mut gv = vec![0.0; n * dv];
        let mut galpha = Vec::new();
        for i in 0..n {
            let (lo, w) = self.row(i);
            let gi = &grad[i * dv..(i + 1) * dv];
            galpha.clear();
            let mut dot = 0.0;
            for (t, &a) in w.iter().enumerate() {
                let j = lo + t;
                let vj = &v[j * dv..(j + 1) * dv];
                let ga: f64 = gi.iter().zip(vj).map(|(x, y)| x * y).sum();
                dot += a * ga;
                galpha.push(ga);
                for (o, &x) in gv[j * dv..(j + 1) * dv].iter_mut().zip(gi) {
                    *o += a * x;
                }
            }
            let qi = &q[i * d..(i + 1) * d];
            for (t, &a) in w.iter().enumerate() {
                let j = lo + t;
                let ge = a * (galpha[t] - dot) * scale;
                if ge == 0.0 {
                    continue;
                }
                for c in 0..d {
                    gq[i * d + c] += ge * k[j * d + c];
                    gk[j * d + c] += ge * qi[c];
                }
            }
        }
        (gq, gk, gv)
    }
}
