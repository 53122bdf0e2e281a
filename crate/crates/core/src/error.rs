use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, widths or configuration values that do not agree.
    #[error("configuration error: {0}")]
    Config(String),

    /// The label sequence cannot be aligned to the available frames; the loss
    /// is +inf.
    #[error("infeasible alignment: {labels} labels cannot be emitted in {frames} frames")]
    Infeasible { frames: usize, labels: usize },

    /// A brute-force oracle was asked to enumerate beyond its scale guard.
    #[error("oracle scale guard exceeded: {0}")]
    OracleScale(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    /// Integer accumulation could overflow 32 bits for this inner dimension.
    #[error("inner dimension {0} could overflow the 32-bit accumulator")]
    AccumulatorOverflow(usize),

    #[error("unknown context-automaton state {0}")]
    UnknownState(u32),

    /// Every biasing phrase contained at least one word missing from the
    /// speller inventory.
    #[error("no spellable phrases; out-of-vocabulary: {0:?}")]
    AllOov(Vec<String>),

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported model container version {0}")]
    Version(u32),

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("pipeline stage `{stage}` failed: {message}")]
    Stage { stage: &'static str, message: String },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

/// Fails with a configuration error unless `got == want`.
pub(crate) fn check_width(what: &str, got: usize, want: usize) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(Error::Config(format!("{what}: width {got}, expected {want}")))
    }
}
