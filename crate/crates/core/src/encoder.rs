//! Unidirectional LSTM encoder with a frame-concatenating time-reduction
//! layer. The stack is split at the reduction point into a lower and an upper
//! half so the two can be driven independently (and on different threads).

use num_traits::Zero;
use serde::{Deserialize, Serialize};

use crate::error::{check_width, Error, Result};
use crate::nn::{LstmLayer, LstmState, Matrix};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub num_layers: usize,
    pub units: usize,
    /// Width of the per-layer output projection; 0 disables projection.
    pub projection_dim: usize,
    pub reduction_factor: usize,
    /// Number of layers below the time-reduction layer.
    pub reduction_after_layer: usize,
    pub layer_norm: bool,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.units == 0 {
            return Err(Error::config("encoder dims must be positive"));
        }
        if self.reduction_factor == 0 {
            return Err(Error::config("time reduction factor must be at least 1"));
        }
        if self.reduction_after_layer == 0 || self.reduction_after_layer >= self.num_layers {
            return Err(Error::config(format!(
                "time reduction after layer {} needs 1 <= k < {} layers",
                self.reduction_after_layer, self.num_layers
            )));
        }
        Ok(())
    }

    /// Width of every layer's output.
    pub fn output_dim(&self) -> usize {
        if self.projection_dim == 0 {
            self.units
        } else {
            self.projection_dim
        }
    }

    pub fn layer_input_dim(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_dim
        } else if layer == self.reduction_after_layer {
            self.output_dim() * self.reduction_factor
        } else {
            self.output_dim()
        }
    }

    /// Number of frames the upper half sees for `frames` inputs.
    pub fn reduced_len(&self, frames: usize) -> usize {
        frames.div_ceil(self.reduction_factor)
    }
}

/// Concatenates each group of `factor` consecutive frames. A final partial
/// group is zero-padded, so `⌈T/factor⌉` frames come out.
pub fn time_reduce<F: Copy + Zero>(frames: &[Vec<F>], factor: usize) -> Result<Vec<Vec<F>>> {
    if factor == 0 {
        return Err(Error::config("time reduction factor must be at least 1"));
    }
    let Some(first) = frames.first() else { return Ok(Vec::new()) };
    let dim = first.len();
    frames
        .chunks(factor)
        .map(|group| {
            let mut out = Vec::with_capacity(dim * factor);
            for f in group {
                check_width("time_reduce frame", f.len(), dim)?;
                out.extend_from_slice(f);
            }
            out.resize(dim * factor, F::zero());
            Ok(out)
        })
        .collect()
}

/// Streaming state of the layers below the reduction point.
#[derive(Clone, Debug)]
pub struct LowerState<F> {
    pub layers: Vec<LstmState<F>>,
    pending: Vec<F>,
    pending_frames: usize,
}

impl<F> LowerState<F> {
    /// Frames buffered toward the next reduced frame; always `< N`.
    pub fn pending(&self) -> usize {
        self.pending_frames
    }
}

/// Streaming state of the layers above the reduction point.
#[derive(Clone, Debug)]
pub struct UpperState<F> {
    pub layers: Vec<LstmState<F>>,
}

#[derive(Clone, Debug)]
pub struct Encoder<M: Matrix> {
    config: EncoderConfig,
    pub(crate) layers: Vec<LstmLayer<M>>,
}

impl<M: Matrix> Encoder<M> {
    pub fn new(config: EncoderConfig, layers: Vec<LstmLayer<M>>) -> Result<Self> {
        config.validate()?;
        check_width("encoder layer count", layers.len(), config.num_layers)?;
        for (i, layer) in layers.iter().enumerate() {
            check_width("encoder layer input", layer.input_width(), config.layer_input_dim(i))?;
            check_width("encoder layer output", layer.output_width(), config.output_dim())?;
            if layer.has_layer_norm() != config.layer_norm {
                return Err(Error::config(format!("encoder layer {i} layer-norm flag disagrees with config")));
            }
        }
        Ok(Encoder { config, layers })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LstmLayer<M>] {
        &self.layers
    }

    fn split(&self) -> usize {
        self.config.reduction_after_layer
    }

    pub fn lower_state(&self) -> LowerState<M::Elem> {
        LowerState {
            layers: self.layers[..self.split()].iter().map(|l| l.zero_state()).collect(),
            pending: Vec::with_capacity(self.config.layer_input_dim(self.split())),
            pending_frames: 0,
        }
    }

    pub fn upper_state(&self) -> UpperState<M::Elem> {
        UpperState { layers: self.layers[self.split()..].iter().map(|l| l.zero_state()).collect() }
    }

    /// Runs one input frame through the lower layers. Returns a reduced frame
    /// once every `N` inputs.
    pub fn lower_step(&self, frame: &[M::Elem], state: &mut LowerState<M::Elem>) -> Result<Option<Vec<M::Elem>>> {
        check_width("encoder input", frame.len(), self.config.input_dim)?;
        let mut x = frame.to_vec();
        for (layer, s) in self.layers[..self.split()].iter().zip(state.layers.iter_mut()) {
            *s = layer.forward(&x, s, None);
            x.clone_from(&s.output);
        }
        state.pending.extend_from_slice(&x);
        state.pending_frames += 1;
        if state.pending_frames == self.config.reduction_factor {
            state.pending_frames = 0;
            Ok(Some(std::mem::take(&mut state.pending)))
        } else {
            Ok(None)
        }
    }

    /// Emits the zero-padded partial group left at end of stream, if any.
    pub fn flush(&self, state: &mut LowerState<M::Elem>) -> Option<Vec<M::Elem>> {
        if state.pending_frames == 0 {
            return None;
        }
        state.pending_frames = 0;
        let mut out = std::mem::take(&mut state.pending);
        out.resize(self.config.layer_input_dim(self.split()), M::Elem::zero());
        Some(out)
    }

    /// Runs one reduced frame through the upper layers.
    pub fn upper_step(&self, reduced: &[M::Elem], state: &mut UpperState<M::Elem>) -> Result<Vec<M::Elem>> {
        check_width("reduced frame", reduced.len(), self.config.layer_input_dim(self.split()))?;
        let mut x = reduced.to_vec();
        for (layer, s) in self.layers[self.split()..].iter().zip(state.layers.iter_mut()) {
            *s = layer.forward(&x, s, None);
            x.clone_from(&s.output);
        }
        Ok(x)
    }

    /// Whole-utterance forward pass, one layer at a time over all frames.
    pub fn forward(&self, frames: &[Vec<M::Elem>]) -> Result<Vec<Vec<M::Elem>>> {
        if frames.is_empty() {
            return Err(Error::Empty("encoder input"));
        }
        let mut xs = frames.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            if i == self.split() {
                xs = time_reduce(&xs, self.config.reduction_factor)?;
            }
            let mut state = layer.zero_state();
            for x in xs.iter_mut() {
                state = layer.step(x, &state)?;
                x.clone_from(&state.output);
            }
        }
        Ok(xs)
    }

    pub(crate) fn map<M2: Matrix>(
        &self,
        fm: &mut dyn FnMut(&M) -> M2,
        fv: &mut dyn FnMut(&[M::Elem]) -> Vec<M2::Elem>,
    ) -> Encoder<M2> {
        Encoder { config: self.config.clone(), layers: self.layers.iter().map(|l| l.map(fm, fv)).collect() }
    }
}
