//! Alignment-lattice losses.
//!
//! [`rnnt_loss`] runs the transducer forward-backward recursion over the
//! `frames × (labels + 1)` grid; [`ctc_loss`] is the frame-synchronous CTC
//! recursion kept as a comparison primitive. Both take raw logits, apply their
//! own log-softmax, work in `f64` and return gradients with respect to the
//! logits. The brute-force enumerators in [`brute`] are the test oracles.

pub mod brute;
mod ctc;
mod gradcheck;
mod rnnt;

pub use ctc::{ctc_loss, CtcLoss};
pub use gradcheck::{ctc_grad_check, finite_difference_check, relative_error, rnnt_grad_check, GRAD_CHECK_FLOOR};
pub use rnnt::{rnnt_loss, LatticePosteriors, RnntLoss};

use crate::error::{Error, Result};

/// Output symbol reserved for "advance one frame, emit nothing".
pub const BLANK: u32 = 0;

/// Target subword IDs. IDs start at 1; 0 is the blank.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LabelSequence(Vec<u32>);

impl LabelSequence {
    pub fn new(labels: Vec<u32>) -> Result<Self> {
        if labels.contains(&BLANK) {
            return Err(Error::config("label sequence contains the blank ID"));
        }
        Ok(LabelSequence(labels))
    }

    pub fn empty() -> Self {
        LabelSequence(Vec::new())
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<u32> {
        self.0
    }

    pub(crate) fn check_classes(&self, classes: usize) -> Result<()> {
        match self.0.iter().find(|&&l| l as usize >= classes) {
            Some(l) => Err(Error::config(format!("label {l} outside {classes} output classes"))),
            None => Ok(()),
        }
    }
}

impl TryFrom<Vec<u32>> for LabelSequence {
    type Error = Error;

    fn try_from(v: Vec<u32>) -> Result<Self> {
        LabelSequence::new(v)
    }
}

/// Joint-network logits for every lattice cell: `frames × (targets + 1)`
/// cells of `classes` values (blank first).
#[derive(Clone, Debug, PartialEq)]
pub struct Lattice {
    frames: usize,
    targets: usize,
    classes: usize,
    logits: Vec<f64>,
}

impl Lattice {
    pub fn new(frames: usize, targets: usize, classes: usize, logits: Vec<f64>) -> Result<Self> {
        if classes < 2 {
            return Err(Error::config("lattice needs blank plus at least one label class"));
        }
        if logits.len() != frames * (targets + 1) * classes {
            return Err(Error::config(format!(
                "lattice {frames}x{}x{classes} needs {} logits, got {}",
                targets + 1,
                frames * (targets + 1) * classes,
                logits.len()
            )));
        }
        Ok(Lattice { frames, targets, classes, logits })
    }

    pub fn from_fn(
        frames: usize,
        targets: usize,
        classes: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut logits = Vec::with_capacity(frames * (targets + 1) * classes);
        for t in 0..frames {
            for u in 0..=targets {
                for k in 0..classes {
                    logits.push(f(t, u, k));
                }
            }
        }
        Lattice::new(frames, targets, classes, logits)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn targets(&self) -> usize {
        self.targets
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn index(&self, t: usize, u: usize) -> usize {
        (t * (self.targets + 1) + u) * self.classes
    }

    pub fn cell(&self, t: usize, u: usize) -> &[f64] {
        let i = self.index(t, u);
        &self.logits[i..i + self.classes]
    }

    pub fn cell_mut(&mut self, t: usize, u: usize) -> &mut [f64] {
        let i = self.index(t, u);
        &mut self.logits[i..i + self.classes]
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }
}
