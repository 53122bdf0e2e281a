use num_traits::Zero;

use std::collections::VecDeque;

use super::tensor::{Float, Matrix, Tensor2D};
use crate::error::{check_width, Error, Result};

pub const LAYER_NORM_EPSILON: f64 = 1e-5;

/// `logaddexp` with `-inf` absorbing.
#[inline]
pub fn logaddexp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

#[inline]
pub fn sigmoid<F: Float>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// Normalizes `x` in place to zero mean and unit (biased) variance and returns
/// `1 / sqrt(var + epsilon)`.
pub(crate) fn normalize_in_place<F: Float>(x: &mut [F], epsilon: F) -> F {
    let n = F::from_usize(x.len()).unwrap();
    let mean = x.iter().copied().sum::<F>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
    let inv_std = F::one() / (var + epsilon).sqrt();
    for v in x.iter_mut() {
        *v = (*v - mean) * inv_std;
    }
    inv_std
}

/// `gain ⊙ (x − mean) / sqrt(var + epsilon) + bias` with the biased variance.
pub fn layer_norm<F: Float>(x: &[F], gain: &[F], bias: &[F], epsilon: F) -> Result<Vec<F>> {
    check_width("layer_norm gain", gain.len(), x.len())?;
    check_width("layer_norm bias", bias.len(), x.len())?;
    if x.is_empty() {
        return Err(Error::Empty("layer_norm input"));
    }
    if epsilon <= F::zero() {
        return Err(Error::config("layer_norm epsilon must be positive"));
    }
    let mut out = x.to_vec();
    normalize_in_place(&mut out, epsilon);
    for ((o, &g), &b) in out.iter_mut().zip(gain).zip(bias) {
        *o = *o * g + b;
    }
    Ok(out)
}

/// `W · x + b`
pub fn affine<M: Matrix>(x: &[M::Elem], w: &M, b: &[M::Elem]) -> Result<Vec<M::Elem>> {
    check_width("affine input", x.len(), w.cols())?;
    check_width("affine bias", b.len(), w.rows())?;
    let mut out = vec![M::Elem::zero(); w.rows()];
    w.matvec_into(x, &mut out);
    for (o, &bias) in out.iter_mut().zip(b) {
        *o += bias;
    }
    Ok(out)
}

/// Numerically stable log-softmax (max subtraction).
pub fn log_softmax<F: Float>(x: &[F]) -> Vec<F> {
    let mut out = x.to_vec();
    log_softmax_in_place(&mut out);
    out
}

pub fn log_softmax_in_place<F: Float>(x: &mut [F]) {
    let max = x.iter().copied().fold(F::neg_infinity(), F::max);
    if !max.is_finite() {
        return;
    }
    let lse = max + x.iter().map(|&v| (v - max).exp()).sum::<F>().ln();
    for v in x.iter_mut() {
        *v -= lse;
    }
}

/// Acoustic (or synthetic) input frames.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub frames: Tensor2D<f32>,
    /// Seconds per frame.
    pub frame_period: f64,
}

impl FeatureSequence {
    pub fn new(frames: Tensor2D<f32>, frame_period: f64) -> Self {
        FeatureSequence { frames, frame_period }
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        self.frames.row(t)
    }

    pub fn duration(&self) -> f64 {
        self.len() as f64 * self.frame_period
    }
}

/// Stacks each frame with `left_context` predecessors (zero-padded at the
/// start) and keeps every `downsample`-th stacked frame.
pub fn stack_frames(f: &FeatureSequence, left_context: usize, downsample: usize) -> Result<FeatureSequence> {
    if f.is_empty() {
        return Err(Error::Empty("feature sequence"));
    }
    let mut stacker = FrameStacker::new(f.dim(), left_context, downsample)?;
    let mut data = Vec::new();
    let mut rows = 0;
    for t in 0..f.len() {
        if let Some(out) = stacker.push(f.frame(t))? {
            data.extend_from_slice(&out);
            rows += 1;
        }
    }
    Ok(FeatureSequence {
        frames: Tensor2D::from_vec(rows, stacker.output_dim(), data)?,
        frame_period: f.frame_period * downsample as f64,
    })
}

/// Streaming counterpart of [`stack_frames`].
#[derive(Clone, Debug)]
pub struct FrameStacker {
    dim: usize,
    left_context: usize,
    downsample: usize,
    history: VecDeque<Vec<f32>>,
    seen: usize,
}

impl FrameStacker {
    pub fn new(dim: usize, left_context: usize, downsample: usize) -> Result<Self> {
        if downsample == 0 {
            return Err(Error::config("downsample must be at least 1"));
        }
        if dim == 0 {
            return Err(Error::config("feature dim must be positive"));
        }
        let history = (0..left_context).map(|_| vec![0.0; dim]).collect();
        Ok(FrameStacker { dim, left_context, downsample, history, seen: 0 })
    }

    pub fn output_dim(&self) -> usize {
        self.dim * (self.left_context + 1)
    }

    pub fn push(&mut self, frame: &[f32]) -> Result<Option<Vec<f32>>> {
        check_width("feature frame", frame.len(), self.dim)?;
        let emit = self.seen.is_multiple_of(self.downsample);
        self.seen += 1;
        let out = emit.then(|| {
            let mut v = Vec::with_capacity(self.output_dim());
            for h in &self.history {
                v.extend_from_slice(h);
            }
            v.extend_from_slice(frame);
            v
        });
        if self.left_context > 0 {
            let mut recycled = self.history.pop_front().unwrap();
            recycled.copy_from_slice(frame);
            self.history.push_back(recycled);
        }
        Ok(out)
    }

    pub fn reset(&mut self) {
        for h in &mut self.history {
            h.iter_mut().for_each(|v| *v = 0.0);
        }
        self.seen = 0;
    }
}
