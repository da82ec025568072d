//! Dense numeric kernels shared by every other module: row-major f32
//! matrices, masked softmax, cross entropy, and a deterministic RNG.
//!
//! Compute is f32 throughout; loss reductions accumulate in f64 before
//! rounding back, so reported losses are stable across summation sizes.

use crate::error::{Error, Result};

/// Row-major f32 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must be rows * cols");
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn fill(&mut self, v: f32) {
        self.data.fill(v);
    }

    pub fn transposed(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `a @ b`. Errors when the inner dimensions disagree.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::DimMismatch {
            a_rows: a.rows,
            a_cols: a.cols,
            b_rows: b.rows,
            b_cols: b.cols,
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    matmul_into(a, b, &mut out);
    Ok(out)
}

/// `out = a @ b` with `out` preallocated. The i-k-j loop order keeps the
/// inner loop contiguous over `b` and `out` rows so it vectorizes.
pub(crate) fn matmul_into(a: &Matrix, b: &Matrix, out: &mut Matrix) {
    debug_assert_eq!(a.cols, b.rows);
    debug_assert_eq!(out.rows, a.rows);
    debug_assert_eq!(out.cols, b.cols);
    let n = b.cols;
    out.data.fill(0.0);
    for (a_row, out_row) in a.data.chunks_exact(a.cols).zip(out.data.chunks_exact_mut(n)) {
        for (k, &a_ik) in a_row.iter().enumerate() {
            if a_ik == 0.0 {
                continue;
            }
            let b_row = &b.data[k * n..(k + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o += a_ik * bv;
            }
        }
    }
}

/// `out += a^T @ b` without materializing the transpose; used by backprop
/// for weight gradients.
pub(crate) fn matmul_at_b_acc(a: &Matrix, b: &Matrix, out: &mut Matrix) {
    debug_assert_eq!(a.rows, b.rows);
    debug_assert_eq!(out.rows, a.cols);
    debug_assert_eq!(out.cols, b.cols);
    let n = b.cols;
    for (a_row, b_row) in a.data.chunks_exact(a.cols).zip(b.data.chunks_exact(n)) {
        for (k, &a_rk) in a_row.iter().enumerate() {
            if a_rk == 0.0 {
                continue;
            }
            let out_row = &mut out.data[k * n..(k + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o += a_rk * bv;
            }
        }
    }
}

/// `out = a @ b^T`; row-major inner products, used for logits against a
/// transposed weight and in attention backprop.
pub(crate) fn matmul_a_bt_into(a: &Matrix, b: &Matrix, out: &mut Matrix) {
    debug_assert_eq!(a.cols, b.cols);
    debug_assert_eq!(out.rows, a.rows);
    debug_assert_eq!(out.cols, b.rows);
    for (a_row, out_row) in a
        .data
        .chunks_exact(a.cols)
        .zip(out.data.chunks_exact_mut(b.rows))
    {
        for (o, b_row) in out_row.iter_mut().zip(b.data.chunks_exact(b.cols)) {
            *o = dot(a_row, b_row);
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-wise softmax of `logits + mask`. Mask entries live in [-inf, 0];
/// -inf removes a key entirely. Max-subtraction keeps exp() in range even
/// for soft-mask penalties up to 1e4.
pub fn masked_softmax(logits: &Matrix, additive_mask: &Matrix) -> Result<Matrix> {
    if logits.rows != additive_mask.rows || logits.cols != additive_mask.cols {
        return Err(Error::ShapeMismatch {
            expected_rows: logits.rows,
            expected_cols: logits.cols,
            got_rows: additive_mask.rows,
            got_cols: additive_mask.cols,
        });
    }
    let mut out = Matrix::zeros(logits.rows, logits.cols);
    for r in 0..logits.rows {
        masked_softmax_row(logits.row(r), additive_mask.row(r), out.row_mut(r))
            .map_err(|_| Error::AllMaskedRow { row: r })?;
    }
    Ok(out)
}

/// Single-row masked softmax into `out`. Errors when every entry is -inf.
pub(crate) fn masked_softmax_row(logits: &[f32], mask: &[f32], out: &mut [f32]) -> Result<()> {
    let mut max = f32::NEG_INFINITY;
    for (&l, &m) in logits.iter().zip(mask.iter()) {
        let v = l + m;
        if v > max {
            max = v;
        }
    }
    if !max.is_finite() {
        return Err(Error::AllMaskedRow { row: 0 });
    }
    let mut sum = 0.0f32;
    for ((&l, &m), o) in logits.iter().zip(mask.iter()).zip(out.iter_mut()) {
        let v = l + m;
        let e = if v == f32::NEG_INFINITY {
            0.0
        } else {
            (v - max).exp()
        };
        *o = e;
        sum += e;
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
    Ok(())
}

/// In-place softmax over a plain (unmasked) row.
pub(crate) fn softmax_row_inplace(row: &mut [f32]) {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Mean negative log-likelihood of `targets` under `logits`, one row per
/// target. Accumulated in f64.
pub fn cross_entropy(logits: &Matrix, targets: &[u32]) -> Result<f64> {
    if logits.rows != targets.len() {
        return Err(Error::ShapeMismatch {
            expected_rows: targets.len(),
            expected_cols: logits.cols,
            got_rows: logits.rows,
            got_cols: logits.cols,
        });
    }
    let mut total = 0.0f64;
    for (r, &t) in targets.iter().enumerate() {
        if t as usize >= logits.cols {
            return Err(Error::TargetOutOfVocab {
                row: r,
                target: t,
                vocab: logits.cols,
            });
        }
        total += nll_of_row(logits.row(r), t as usize);
    }
    Ok(total / targets.len() as f64)
}

/// -log softmax(row)[target] via log-sum-exp in f64.
pub(crate) fn nll_of_row(row: &[f32], target: usize) -> f64 {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let mut sum = 0.0f64;
    for &v in row {
        sum += (v as f64 - max).exp();
    }
    max + sum.ln() - row[target] as f64
}

/// Splittable counter-based generator (SplitMix64). The stream is pure
/// integer arithmetic, so identical seeds give identical streams on every
/// platform.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Derives an independent child stream; the parent advances by one draw.
    pub fn split(&mut self) -> Rng {
        Rng {
            state: mix64(self.next_u64() ^ 0x5851_f42d_4c95_7f2d),
        }
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next_f32(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 * (1.0 / (1u64 << 24) as f32)
    }

    /// Uniform integer in [0, bound) by rejection, bias-free.
    pub fn next_below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0);
        let zone = u64::MAX - (u64::MAX % bound);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % bound;
            }
        }
    }

    /// Standard normal via Box-Muller.
    pub fn next_normal(&mut self) -> f32 {
        let u1 = self.next_f64().max(1e-300);
        let u2 = self.next_f64();
        ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
    }
}
