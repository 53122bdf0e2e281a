//! Streaming RNN transducer speech recognition: training losses, an LSTM
//! encoder with time reduction, prefix-cached beam search, contextual
//! biasing, int8 inference and a pipelined runtime.

pub mod biasing;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod loss;
pub mod model;
pub mod nn;
pub mod quant;
pub mod runtime;
pub mod tooling;

pub use error::{Error, Result};
