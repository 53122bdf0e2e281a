use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{FromPrimitive, NumAssign};

use crate::error::{Error, Result};

/// Scalar type of the float path. `f32` is used for inference, `f64` by the
/// trainer and the gradient checks.
pub trait Float:
    num_traits::Float + NumAssign + FromPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// `out[r] = Σ_c w[r·cols + c] · x[c]` over a row-major matrix.
    fn gemv(w: &[Self], cols: usize, x: &[Self], out: &mut [Self]) {
        gemv_portable(w, cols, x, out)
    }

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).unwrap_or_else(Self::nan)
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Float for f32 {
    fn gemv(w: &[f32], cols: usize, x: &[f32], out: &mut [f32]) {
        #[cfg(target_arch = "x86_64")]
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime.
            unsafe { gemv_avx2(w, cols, x, out) };
            return;
        }
        gemv_portable(w, cols, x, out)
    }
}

impl Float for f64 {
    fn gemv(w: &[f64], cols: usize, x: &[f64], out: &mut [f64]) {
        #[cfg(target_arch = "x86_64")]
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime.
            unsafe { gemv_avx2(w, cols, x, out) };
            return;
        }
        gemv_portable(w, cols, x, out)
    }
}

/// Dot product with eight independent partial sums. The summation order is
/// fixed, so vectorized and scalar builds produce identical bits.
#[inline(always)]
pub(crate) fn dot<F: Float>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [F::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = F::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline(always)]
fn gemv_portable<F: Float>(w: &[F], cols: usize, x: &[F], out: &mut [F]) {
    debug_assert_eq!(w.len(), cols * out.len());
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o = dot(row, x);
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemv_avx2<F: Float>(w: &[F], cols: usize, x: &[F], out: &mut [F]) {
    gemv_portable(w, cols, x, out)
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor2D<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Float> Tensor2D<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "tensor dims must be positive");
        Tensor2D { rows, cols, data: vec![F::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::config(format!("tensor dims must be positive, got {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::config(format!(
                "tensor {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Tensor2D { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> F) -> Self {
        assert!(rows > 0 && cols > 0, "tensor dims must be positive");
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Tensor2D { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { F::one() } else { F::zero() })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: F) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn matvec(&self, x: &[F]) -> Vec<F> {
        let mut out = vec![F::zero(); self.rows];
        Matrix::matvec_into(self, x, &mut out);
        out
    }

    /// `dx += Wᵀ · dy`
    pub fn matvec_t_acc(&self, dy: &[F], dx: &mut [F]) {
        debug_assert_eq!(dy.len(), self.rows);
        debug_assert_eq!(dx.len(), self.cols);
        for (row, &g) in self.data.chunks_exact(self.cols).zip(dy) {
            if g == F::zero() {
                continue;
            }
            for (d, &w) in dx.iter_mut().zip(row) {
                *d += g * w;
            }
        }
    }

    /// `W += dy · xᵀ`
    pub fn outer_acc(&mut self, dy: &[F], x: &[F]) {
        debug_assert_eq!(dy.len(), self.rows);
        debug_assert_eq!(x.len(), self.cols);
        for (row, &g) in self.data.chunks_exact_mut(self.cols).zip(dy) {
            if g == F::zero() {
                continue;
            }
            for (w, &v) in row.iter_mut().zip(x) {
                *w += g * v;
            }
        }
    }

    pub fn map<G: Float>(&self, f: impl Fn(F) -> G) -> Tensor2D<G> {
        Tensor2D { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn max_abs(&self) -> F {
        self.data.iter().fold(F::zero(), |m, v| m.max(v.abs()))
    }
}

/// Anything that can act as a weight matrix: dense floats or quantized
/// payloads. Implementations are immutable and shareable across threads.
pub trait Matrix: Clone + Debug + Send + Sync {
    type Elem: Float;

    fn rows(&self) -> usize;
    fn cols(&self) -> usize;

    /// `out = self · x`, overwriting `out`.
    fn matvec_into(&self, x: &[Self::Elem], out: &mut [Self::Elem]);

    /// Copies row `r` (dequantized if needed) into `out`.
    fn row_into(&self, r: usize, out: &mut [Self::Elem]);
}

impl<F: Float> Matrix for Tensor2D<F> {
    type Elem = F;

    fn rows(&self) -> usize {
        self.rows
    }

    fn cols(&self) -> usize {
        self.cols
    }

    fn matvec_into(&self, x: &[F], out: &mut [F]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        F::gemv(&self.data, self.cols, x, out)
    }

    fn row_into(&self, r: usize, out: &mut [F]) {
        out.copy_from_slice(self.row(r));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_matches_naive_sum_order_free_cases() {
        let w = Tensor2D::<f64>::from_fn(3, 19, |r, c| (r * 19 + c) as f64 * 0.5);
        let x: Vec<f64> = (0..19).map(|c| c as f64).collect();
        let got = w.matvec(&x);
        for r in 0..3 {
            let want: f64 = (0..19).map(|c| w.get(r, c) * x[c]).sum();
            assert_eq!(got[r], want);
        }
    }

    #[test]
    fn avx_and_portable_paths_agree_bitwise() {
        let w = Tensor2D::<f32>::from_fn(7, 37, |r, c| ((r * 31 + c * 17) % 13) as f32 * 0.137 - 0.8);
        let x: Vec<f32> = (0..37).map(|c| (c as f32 * 0.71).sin()).collect();
        let mut fast = vec![0.0; 7];
        let mut slow = vec![0.0; 7];
        f32::gemv(w.data(), 37, &x, &mut fast);
        gemv_portable(w.data(), 37, &x, &mut slow);
        assert_eq!(fast, slow);
    }

    #[test]
    fn transpose_and_outer_products() {
        let w = Tensor2D::<f64>::from_vec(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let mut dx = vec![0.0; 3];
        w.matvec_t_acc(&[1.0, -1.0], &mut dx);
        assert_eq!(dx, vec![-3.0, -3.0, -3.0]);
        let mut g = Tensor2D::<f64>::zeros(2, 3);
        g.outer_acc(&[2.0, 1.0], &[1.0, 0.0, -1.0]);
        assert_eq!(g.data(), &[2.0, 0.0, -2.0, 1.0, 0.0, -1.0]);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor2D::<f32>::from_vec(0, 2, vec![]).is_err());
        assert!(Tensor2D::<f32>::from_vec(2, 2, vec![1.0]).is_err());
    }
}
