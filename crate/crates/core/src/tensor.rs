//! Dense row-major `f32` matrices with just the kernels the toy model needs.

use serde::{Deserialize, Serialize};

use crate::par;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Panics if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn from_rows<R: AsRef<[f32]>>(cols: usize, rows: &[R]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "row width mismatch");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `self · rhs`, parallel over blocks of output rows. Every output
    /// element accumulates over `k` in the same order whatever the blocking,
    /// so results do not depend on the thread count.
    pub fn matmul(&self, rhs: &Matrix) -> Matrix {
        const ROW_BLOCK: usize = 8;
        assert_eq!(self.cols, rhs.rows, "matmul inner dimension mismatch");
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        let n = rhs.cols;
        par::for_each_row_block(&mut out.data, n, ROW_BLOCK, |first, rows| {
            let a = &self.data[first * self.cols..(first + rows.len() / n) * self.cols];
            block_kernel(a, self.cols, &rhs.data, n, rows);
        });
        out
    }

    pub fn add_assign(&mut self, rhs: &Matrix) {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += *b;
        }
    }

    /// Rows `indices` of `self`, in the given order.
    pub fn gather_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Append the rows of `other` below `self`.
    pub fn append_rows(&mut self, other: &Matrix) {
        if self.rows == 0 && self.cols == 0 {
            self.cols = other.cols;
        }
        assert_eq!(self.cols, other.cols, "column mismatch on append");
        self.data.extend_from_slice(&other.data);
        self.rows += other.rows;
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f32 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// `out += a · b` for a block of rows. `a` is `rows × inner`, `b` is
/// `inner × n`.
fn block_kernel(a: &[f32], inner: usize, b: &[f32], n: usize, out: &mut [f32]) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2, checked just above.
            unsafe { block_kernel_avx2(a, inner, b, n, out) };
            return;
        }
    }
    block_kernel_generic(a, inner, b, n, out);
}

/// Same code compiled with AVX2 enabled. No FMA, so results match the
/// generic build bit for bit.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn block_kernel_avx2(a: &[f32], inner: usize, b: &[f32], n: usize, out: &mut [f32]) {
    block_kernel_generic(a, inner, b, n, out);
}

#[inline(always)]
fn block_kernel_generic(a: &[f32], inner: usize, b: &[f32], n: usize, out: &mut [f32]) {
    let brow = |k: usize| &b[k * n..][..n];
    // four rows of b per pass, reused across the block
    let mut k = 0;
    while k + 4 <= inner {
        let (b0, b1, b2, b3) = (brow(k), brow(k + 1), brow(k + 2), brow(k + 3));
        for (ar, o) in a.chunks_exact(inner).zip(out.chunks_exact_mut(n)) {
            let (a0, a1, a2, a3) = (ar[k], ar[k + 1], ar[k + 2], ar[k + 3]);
            let o = &mut o[..n];
            for j in 0..n {
                o[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
        }
        k += 4;
    }
    for k in k..inner {
        let bk = brow(k);
        for (ar, o) in a.chunks_exact(inner).zip(out.chunks_exact_mut(n)) {
            let x = ar[k];
            for (o, &bkj) in o.iter_mut().zip(bk) {
                *o += x * bkj;
            }
        }
    }
}

/// Root-mean-square normalisation with a learned gain, row by row.
pub fn rms_norm(x: &Matrix, gain: &[f32], eps: f32) -> Matrix {
    assert_eq!(x.cols(), gain.len());
    let mut out = x.clone();
    let cols = x.cols();
    par::for_each_row(out.as_mut_slice(), cols, |_, row| {
        let ms = row.iter().map(|v| v * v).sum::<f32>() / cols as f32;
        let inv = 1.0 / (ms + eps).sqrt();
        for (v, g) in row.iter_mut().zip(gain) {
            *v *= inv * g;
        }
    });
    out
}

/// Tanh-approximated GELU.
#[inline]
pub fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// Numerically stable softmax of `logits` into `out`.
pub fn softmax_into(logits: &[f32], out: &mut [f32]) {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Matrix::from_vec(2, 3, vec![1., 2., 3., 4., 5., 6.]);
        let b = Matrix::from_vec(3, 2, vec![7., 8., 9., 10., 11., 12.]);
        let c = a.matmul(&b);
        assert_eq!(c.as_slice(), &[58., 64., 139., 154.]);
    }

    #[test]
    fn softmax_is_stable_and_normalised() {
        let p = softmax(&[1000.0, 1000.0, -1000.0]);
        assert!((p[0] - 0.5).abs() < 1e-7 && (p[1] - 0.5).abs() < 1e-7);
        assert_eq!(p[2], 0.0);
    }

    #[test]
    fn rms_norm_unit_gain_gives_unit_rms() {
        let x = Matrix::from_vec(1, 4, vec![1., -2., 3., -4.]);
        let y = rms_norm(&x, &[1.0; 4], 0.0);
        let ms: f32 = y.row(0).iter().map(|v| v * v).sum::<f32>() / 4.0;
        assert!((ms - 1.0).abs() < 1e-6);
    }

    #[test]
    fn gather_and_append() {
        let mut a = Matrix::from_rows(2, &[[1., 2.], [3., 4.]]);
        let b = Matrix::from_rows(2, &[[5., 6.]]);
        a.append_rows(&b);
        assert_eq!(a.rows(), 3);
        let g = a.gather_rows(&[2, 0]);
        assert_eq!(g.as_slice(), &[5., 6., 1., 2.]);
    }
}
