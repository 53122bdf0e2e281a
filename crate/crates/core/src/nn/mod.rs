//! Framework-free neural primitives: dense tensors, LSTM cells with
//! projection and per-gate layer norm, affine maps, log-softmax and the
//! frame stacker of the feature frontend.

mod lstm;
mod ops;
mod tensor;

pub use lstm::{GateShift, LstmLayer, LstmState, StepTrace};
pub use ops::{
    affine, layer_norm, log_softmax, log_softmax_in_place, logaddexp, sigmoid, stack_frames, FeatureSequence,
    FrameStacker, LAYER_NORM_EPSILON,
};
pub use tensor::{Float, Matrix, Tensor2D};
