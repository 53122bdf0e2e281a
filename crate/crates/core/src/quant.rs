//! Int8 parameter quantization and fixed-point matrix-vector kernels.
//!
//! The symmetric scheme maps `x ↦ round(x·θ)` with `θ = 127 / max|x|` and no
//! offset, so an int8 × int8 product is at most 127² < 2¹⁴ and two of them
//! fit in 16 bits before widening into a 32-bit accumulator. The asymmetric
//! scheme (scale plus zero point) is kept for comparison; its kernel has to
//! subtract the zero point before every multiply.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{Matrix, Tensor2D};

const QMAX: i32 = 127;

/// Largest inner dimension whose worst-case dot product `n · 127²` stays
/// below 2³¹.
pub const MAX_INNER_DIM: usize = (i32::MAX as usize) / (127 * 127);

/// Rounds half away from zero (what `f64::round` does).
#[inline]
fn round_away(v: f64) -> f64 {
    v.round()
}

#[inline]
fn clamp_sym(v: f64) -> i8 {
    round_away(v).clamp(-QMAX as f64, QMAX as f64) as i8
}

fn check_finite(x: &[f32]) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("quantization input"))
    }
}

/// `θ = 127 / max(|min|, |max|)`, or 1 for an all-zero input.
pub fn symmetric_theta(x: &[f32]) -> f64 {
    let m = x.iter().fold(0.0f64, |m, &v| m.max((v as f64).abs()));
    if m == 0.0 {
        1.0
    } else {
        QMAX as f64 / m
    }
}

/// Quantizes a vector symmetrically, returning values and `θ`.
pub fn quantize_vector(x: &[f32]) -> Result<(Vec<i8>, f64)> {
    check_finite(x)?;
    let theta = symmetric_theta(x);
    Ok((x.iter().map(|&v| clamp_sym(v as f64 * theta)).collect(), theta))
}

/// Symmetric per-tensor int8 weights: `value ≈ original · θ`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    rows: usize,
    cols: usize,
    values: Vec<i8>,
    theta: f64,
    /// Rows zero-padded to a multiple of [`BLOCK`] columns for the kernel.
    packed: Vec<i8>,
}

/// Column block of the vector kernel.
const BLOCK: usize = 32;

fn padded(cols: usize) -> usize {
    cols.div_ceil(BLOCK) * BLOCK
}

fn pack(values: &[i8], cols: usize) -> Vec<i8> {
    let stride = padded(cols);
    let mut out = vec![0; values.len() / cols * stride];
    for (dst, src) in out.chunks_exact_mut(stride).zip(values.chunks_exact(cols)) {
        dst[..cols].copy_from_slice(src);
    }
    out
}

pub fn quantize_symmetric(x: &Tensor2D<f32>) -> Result<QuantizedTensor> {
    let (values, theta) = quantize_vector(x.data())?;
    QuantizedTensor::from_parts(x.rows(), x.cols(), values, theta)
}

impl QuantizedTensor {
    pub fn from_parts(rows: usize, cols: usize, values: Vec<i8>, theta: f64) -> Result<Self> {
        if rows == 0 || cols == 0 || values.len() != rows * cols {
            return Err(Error::config(format!("quantized tensor {rows}x{cols} with {} values", values.len())));
        }
        if values.contains(&i8::MIN) {
            return Err(Error::config("symmetric values must lie in ±127"));
        }
        if !(theta > 0.0 && theta.is_finite()) {
            return Err(Error::config("quantization factor must be positive"));
        }
        let packed = pack(&values, cols);
        Ok(QuantizedTensor { rows, cols, values, theta, packed })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[i8] {
        &self.values
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn dequantize(&self) -> Tensor2D<f32> {
        let data = self.values.iter().map(|&q| (q as f64 / self.theta) as f32).collect();
        Tensor2D::from_vec(self.rows, self.cols, data).expect("shape checked at construction")
    }
}

/// Affine int8 weights: `original ≈ (value − zero_point) / scale`.
#[derive(Clone, Debug, PartialEq)]
pub struct AsymQuantizedTensor {
    rows: usize,
    cols: usize,
    values: Vec<i8>,
    scale: f64,
    zero_point: i32,
}

/// Maps `[min, max]` onto `[-128, 127]`. A constant tensor `c` gets scale
/// `1/|c|` and zero point 0 (scale 1 for `c = 0`) so it reconstructs exactly.
pub fn quantize_asymmetric(x: &Tensor2D<f32>) -> Result<AsymQuantizedTensor> {
    check_finite(x.data())?;
    let (lo, hi) = x.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v as f64), hi.max(v as f64))
    });
    let (scale, zero_point) = if hi > lo {
        let scale = 255.0 / (hi - lo);
        (scale, round_away(-128.0 - lo * scale) as i32)
    } else if lo != 0.0 {
        (1.0 / lo.abs(), 0)
    } else {
        (1.0, 0)
    };
    let values = x
        .data()
        .iter()
        .map(|&v| round_away(v as f64 * scale + zero_point as f64).clamp(-128.0, 127.0) as i8)
        .collect();
    Ok(AsymQuantizedTensor { rows: x.rows(), cols: x.cols(), values, scale, zero_point })
}

impl AsymQuantizedTensor {
    pub fn from_parts(rows: usize, cols: usize, values: Vec<i8>, scale: f64, zero_point: i32) -> Result<Self> {
        if rows == 0 || cols == 0 || values.len() != rows * cols {
            return Err(Error::config(format!("quantized tensor {rows}x{cols} with {} values", values.len())));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::config("quantization scale must be positive"));
        }
        Ok(AsymQuantizedTensor { rows, cols, values, scale, zero_point })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[i8] {
        &self.values
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn zero_point(&self) -> i32 {
        self.zero_point
    }

    pub fn dequantize(&self) -> Tensor2D<f32> {
        let data = self.values.iter().map(|&q| ((q as i32 - self.zero_point) as f64 / self.scale) as f32).collect();
        Tensor2D::from_vec(self.rows, self.cols, data).expect("shape checked at construction")
    }

    /// Largest `|value − zero_point|`.
    fn max_offset(&self) -> i64 {
        self.values.iter().map(|&q| (q as i64 - self.zero_point as i64).abs()).max().unwrap_or(0)
    }
}

/// Sum of `a[i]·b[i]`, adding each pair of products in 16 bits before
/// widening. Inputs must lie in ±127.
#[inline(always)]
fn dot_i8_portable(a: &[i8], b: &[i8]) -> i32 {
    let mut acc = 0i32;
    let pairs_a = a.chunks_exact(2);
    let pairs_b = b.chunks_exact(2);
    let tail = pairs_a.remainder().iter().zip(pairs_b.remainder()).map(|(&x, &y)| x as i32 * y as i32).sum::<i32>();
    for (x, y) in pairs_a.zip(pairs_b) {
        let pair = (x[0] as i16 * y[0] as i16) + (x[1] as i16 * y[1] as i16);
        acc += pair as i32;
    }
    acc + tail
}

/// `out[r] = Σ w[r·stride + c]·x[c]` over rows padded to `stride`, a multiple
/// of [`BLOCK`]; `x` has `stride` entries.
///
/// Each block multiplies `|x|` (unsigned) by `w` carrying the sign of `x`;
/// `maddubs` adds adjacent products in 16 bits (at most 2·127² < 2¹⁵, so it
/// never saturates) and `madd` widens pairs of those into 32-bit lanes. Four
/// rows share one horizontal reduction.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemv_i8_avx2(w: &[i8], stride: usize, x: &[i8], out: &mut [i32]) {
    use std::arch::x86_64::*;
    debug_assert_eq!(stride % BLOCK, 0);
    debug_assert_eq!(x.len(), stride);
    debug_assert_eq!(w.len(), out.len() * stride);
    let rows = out.len();
    let blocks = stride / BLOCK;
    let ones = _mm256_set1_epi16(1);
    let wp = w.as_ptr();
    let xp = x.as_ptr();
    let block_dot = |row: usize, b: usize, ax: __m256i, xv: __m256i| -> __m256i {
        let wv = _mm256_loadu_si256(wp.add(row * stride + b * BLOCK) as *const __m256i);
        _mm256_madd_epi16(_mm256_maddubs_epi16(ax, _mm256_sign_epi8(wv, xv)), ones)
    };
    let mut r = 0;
    while r + 4 <= rows {
        let (mut a0, mut a1, mut a2, mut a3) =
            (_mm256_setzero_si256(), _mm256_setzero_si256(), _mm256_setzero_si256(), _mm256_setzero_si256());
        for b in 0..blocks {
            let xv = _mm256_loadu_si256(xp.add(b * BLOCK) as *const __m256i);
            let ax = _mm256_abs_epi8(xv);
            a0 = _mm256_add_epi32(a0, block_dot(r, b, ax, xv));
            a1 = _mm256_add_epi32(a1, block_dot(r + 1, b, ax, xv));
            a2 = _mm256_add_epi32(a2, block_dot(r + 2, b, ax, xv));
            a3 = _mm256_add_epi32(a3, block_dot(r + 3, b, ax, xv));
        }
        let s = _mm256_hadd_epi32(_mm256_hadd_epi32(a0, a1), _mm256_hadd_epi32(a2, a3));
        let sum = _mm_add_epi32(_mm256_castsi256_si128(s), _mm256_extracti128_si256(s, 1));
        _mm_storeu_si128(out.as_mut_ptr().add(r) as *mut __m128i, sum);
        r += 4;
    }
    while r < rows {
        let mut a = _mm256_setzero_si256();
        for b in 0..blocks {
            let xv = _mm256_loadu_si256(xp.add(b * BLOCK) as *const __m256i);
            a = _mm256_add_epi32(a, block_dot(r, b, _mm256_abs_epi8(xv), xv));
        }
        let h = _mm_add_epi32(_mm256_castsi256_si128(a), _mm256_extracti128_si256(a, 1));
        let h = _mm_add_epi32(h, _mm_shuffle_epi32(h, 0b01_00_11_10));
        let h = _mm_add_epi32(h, _mm_shuffle_epi32(h, 0b10_11_00_01));
        out[r] = _mm_cvtsi128_si32(h);
        r += 1;
    }
}

fn use_avx2() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::is_x86_feature_detected!("avx2")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

/// Packed-row product; `x` is padded to the row stride.
fn gemv_i8(w: &[i8], stride: usize, x: &[i8], out: &mut [i32], avx2: bool) {
    #[cfg(target_arch = "x86_64")]
    if avx2 {
        // SAFETY: only requested after runtime detection; shapes are
        // guaranteed by the callers.
        unsafe { gemv_i8_avx2(w, stride, x, out) };
        return;
    }
    let _ = avx2;
    for (o, row) in out.iter_mut().zip(w.chunks_exact(stride)) {
        *o = dot_i8_portable(row, x);
    }
}

fn check_inner(cols: usize, v: usize) -> Result<()> {
    if cols != v {
        return Err(Error::config(format!("qmatvec inner dims {cols} vs {v}")));
    }
    if cols > MAX_INNER_DIM {
        return Err(Error::AccumulatorOverflow(cols));
    }
    Ok(())
}

fn qmatvec_i32_with(w: &QuantizedTensor, v: &[i8], avx2: bool) -> Result<Vec<i32>> {
    check_inner(w.cols, v.len())?;
    let mut x = vec![0; padded(w.cols)];
    x[..v.len()].copy_from_slice(v);
    let mut out = vec![0; w.rows];
    gemv_i8(&w.packed, padded(w.cols), &x, &mut out, avx2);
    Ok(out)
}

/// Raw 32-bit accumulators of `W · v`.
pub fn qmatvec_i32(w: &QuantizedTensor, v: &[i8]) -> Result<Vec<i32>> {
    qmatvec_i32_with(w, v, use_avx2())
}

/// Same as [`qmatvec_i32`] on the portable kernel only.
pub fn qmatvec_i32_portable(w: &QuantizedTensor, v: &[i8]) -> Result<Vec<i32>> {
    qmatvec_i32_with(w, v, false)
}

#[inline(always)]
fn quantize_activations_body(x: &[f32], out: &mut [i8]) -> f64 {
    let m = x.iter().fold(0.0f32, |m, &v| m.max(v.abs()));
    let theta = if m == 0.0 { 1.0 } else { QMAX as f64 / m as f64 };
    for (o, &v) in out.iter_mut().zip(x) {
        *o = clamp_sym(v as f64 * theta);
    }
    theta
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn quantize_activations_avx2(x: &[f32], out: &mut [i8]) -> f64 {
    quantize_activations_body(x, out)
}

/// Symmetric per-call quantization of `x` into the first `x.len()` entries of
/// `out`; same values as [`quantize_vector`].
fn quantize_activations(x: &[f32], out: &mut [i8], avx2: bool) -> f64 {
    #[cfg(target_arch = "x86_64")]
    if avx2 {
        // SAFETY: only requested after runtime detection.
        return unsafe { quantize_activations_avx2(x, out) };
    }
    let _ = avx2;
    quantize_activations_body(x, out)
}

thread_local! {
    /// Quantized activations and accumulators reused across products.
    static SCRATCH: std::cell::RefCell<(Vec<i8>, Vec<i32>)> =
        const { std::cell::RefCell::new((Vec::new(), Vec::new())) };
}

/// `W · v` in float, for `v` quantized with factor `theta_v`.
pub fn qmatvec(w: &QuantizedTensor, v: &[i8], theta_v: f64) -> Result<Vec<f32>> {
    let acc = qmatvec_i32(w, v)?;
    let inv = 1.0 / (w.theta * theta_v);
    Ok(acc.into_iter().map(|a| (a as f64 * inv) as f32).collect())
}

fn check_asym_inner(w: &AsymQuantizedTensor, v: usize) -> Result<()> {
    if w.cols != v {
        return Err(Error::config(format!("qmatvec inner dims {} vs {v}", w.cols)));
    }
    if w.cols as i64 * w.max_offset() * QMAX as i64 > i32::MAX as i64 {
        return Err(Error::AccumulatorOverflow(w.cols));
    }
    Ok(())
}

/// `W · v` for affine weights; the zero point is subtracted from every weight
/// before it is multiplied.
pub fn qmatvec_asym(w: &AsymQuantizedTensor, v: &[i8], theta_v: f64) -> Result<Vec<f32>> {
    check_asym_inner(w, v.len())?;
    let mut out = vec![0.0; w.rows];
    qmatvec_asym_into(w, v, theta_v, &mut out);
    Ok(out)
}

fn qmatvec_asym_into(w: &AsymQuantizedTensor, v: &[i8], theta_v: f64, out: &mut [f32]) {
    let inv = 1.0 / (w.scale * theta_v);
    let zp = w.zero_point;
    for (o, row) in out.iter_mut().zip(w.values.chunks_exact(w.cols)) {
        let acc: i32 = row.iter().zip(v).map(|(&q, &x)| (q as i32 - zp) * x as i32).sum();
        *o = (acc as f64 * inv) as f32;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Sym,
    Asym,
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sym" => Ok(Scheme::Sym),
            "asym" => Ok(Scheme::Asym),
            _ => Err(Error::config(format!("unknown quantization scheme `{s}` (sym|asym)"))),
        }
    }
}

/// A weight matrix in any supported storage. Activations stay `f32`; the
/// quantized variants quantize the input vector on every product.
#[derive(Clone, Debug, PartialEq)]
pub enum WeightMatrix {
    Float(Tensor2D<f32>),
    Symmetric(QuantizedTensor),
    Asymmetric(AsymQuantizedTensor),
}

impl WeightMatrix {
    pub fn scheme(&self) -> Option<Scheme> {
        match self {
            WeightMatrix::Float(_) => None,
            WeightMatrix::Symmetric(_) => Some(Scheme::Sym),
            WeightMatrix::Asymmetric(_) => Some(Scheme::Asym),
        }
    }

    pub fn dequantize(&self) -> Tensor2D<f32> {
        match self {
            WeightMatrix::Float(t) => t.clone(),
            WeightMatrix::Symmetric(q) => q.dequantize(),
            WeightMatrix::Asymmetric(q) => q.dequantize(),
        }
    }

    /// Bytes of serialized values plus per-tensor scale metadata.
    pub fn payload_bytes(&self) -> usize {
        match self {
            WeightMatrix::Float(t) => 4 * t.data().len(),
            WeightMatrix::Symmetric(q) => q.values.len() + 8,
            WeightMatrix::Asymmetric(q) => q.values.len() + 12,
        }
    }
}

impl Matrix for WeightMatrix {
    type Elem = f32;

    fn rows(&self) -> usize {
        match self {
            WeightMatrix::Float(t) => t.rows(),
            WeightMatrix::Symmetric(q) => q.rows,
            WeightMatrix::Asymmetric(q) => q.rows,
        }
    }

    fn cols(&self) -> usize {
        match self {
            WeightMatrix::Float(t) => t.cols(),
            WeightMatrix::Symmetric(q) => q.cols,
            WeightMatrix::Asymmetric(q) => q.cols,
        }
    }

    fn matvec_into(&self, x: &[f32], out: &mut [f32]) {
        match self {
            WeightMatrix::Float(t) => t.matvec_into(x, out),
            WeightMatrix::Symmetric(q) => {
                let avx2 = use_avx2();
                let stride = padded(q.cols);
                SCRATCH.with(|cell| {
                    let (xq, acc) = &mut *cell.borrow_mut();
                    xq.clear();
                    xq.resize(stride, 0);
                    acc.clear();
                    acc.resize(q.rows, 0);
                    let theta_x = quantize_activations(x, xq, avx2);
                    gemv_i8(&q.packed, stride, xq, acc, avx2);
                    let inv = 1.0 / (q.theta * theta_x);
                    for (o, &a) in out.iter_mut().zip(acc.iter()) {
                        *o = (a as f64 * inv) as f32;
                    }
                });
            }
            WeightMatrix::Asymmetric(q) => {
                let theta_x = symmetric_theta(x);
                let xq: Vec<i8> = x.iter().map(|&v| clamp_sym(v as f64 * theta_x)).collect();
                qmatvec_asym_into(q, &xq, theta_x, out);
            }
        }
    }

    fn row_into(&self, r: usize, out: &mut [f32]) {
        match self {
            WeightMatrix::Float(t) => out.copy_from_slice(t.row(r)),
            WeightMatrix::Symmetric(q) => {
                for (o, &v) in out.iter_mut().zip(&q.values[r * q.cols..(r + 1) * q.cols]) {
                    *o = (v as f64 / q.theta) as f32;
                }
            }
            WeightMatrix::Asymmetric(q) => {
                for (o, &v) in out.iter_mut().zip(&q.values[r * q.cols..(r + 1) * q.cols]) {
                    *o = ((v as i32 - q.zero_point) as f64 / q.scale) as f32;
                }
            }
        }
    }
}

/// Model whose matrices may be stored quantized.
pub type EngineModel = Model<WeightMatrix>;

/// Wraps a float model without quantizing it.
pub fn float_engine(model: &Model<Tensor2D<f32>>) -> EngineModel {
    model.map(&mut |m| WeightMatrix::Float(m.clone()), &mut |v| v.to_vec())
}

/// Quantizes every weight matrix per tensor; vectors (biases, norm gains)
/// stay `f32`.
pub fn quantize_model(model: &Model<Tensor2D<f32>>, scheme: Scheme) -> Result<EngineModel> {
    let mut err = None;
    let out = model.map(
        &mut |m| {
            let q = match scheme {
                Scheme::Sym => quantize_symmetric(m).map(WeightMatrix::Symmetric),
                Scheme::Asym => quantize_asymmetric(m).map(WeightMatrix::Asymmetric),
            };
            q.unwrap_or_else(|e| {
                err.get_or_insert(e);
                WeightMatrix::Float(m.clone())
            })
        },
        &mut |v| v.to_vec(),
    );
    match err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

/// Weight-matrix payload bytes of a model.
pub fn matrix_payload_bytes(model: &EngineModel) -> usize {
    let mut total = 0;
    model.visit(&mut |_, p| {
        if let crate::model::Param::Matrix(m) = p {
            total += m.payload_bytes();
        }
    });
    total
}
