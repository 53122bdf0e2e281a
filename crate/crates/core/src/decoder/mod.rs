//! Prediction and joint networks, the prefix-keyed prediction-state cache and
//! frame-synchronous beam search with an external score-fusion hook.

mod cache;
mod joint;
mod prediction;
mod search;

pub use cache::{extend_entry, pred_forward, start_entry, CacheStats, PredCache, PredEntry};
pub use joint::{JointConfig, JointNetwork};
pub use prediction::{PredictionConfig, PredictionNetwork, SOS};
pub use search::{
    decode_step, greedy_decode, DecodeParams, FusionHook, Hypothesis, NBest, NBestEntry, NoFusion, Searcher,
};

use num_traits::Zero;

use crate::encoder::{LowerState, UpperState};
use crate::error::{Error, Result};
use crate::loss::brute::rnnt_loss_bruteforce;
use crate::loss::{LabelSequence, Lattice};
use crate::model::Model;
use crate::nn::{stack_frames, FeatureSequence, Float, FrameStacker, Matrix};

/// Frontend stacking plus the whole-utterance encoder pass.
pub fn encode<M: Matrix>(model: &Model<M>, features: &FeatureSequence) -> Result<Vec<Vec<M::Elem>>> {
    let fe = &model.config().frontend;
    let stacked = stack_frames(features, fe.left_context, fe.downsample)?;
    let frames: Vec<Vec<M::Elem>> = (0..stacked.len())
        .map(|t| stacked.frame(t).iter().map(|&v| M::Elem::from_f64_lossy(v as f64)).collect())
        .collect();
    model.encoder().forward(&frames)
}

/// Batch decode of one utterance.
pub fn decode_utterance<M: Matrix>(
    model: &Model<M>,
    features: &FeatureSequence,
    params: &DecodeParams,
    fusion: &dyn FusionHook,
) -> Result<NBest> {
    if features.is_empty() {
        return Err(Error::Empty("feature sequence"));
    }
    let enc = encode(model, features)?;
    let mut search = Searcher::new(model, params.clone(), fusion)?;
    for frame in &enc {
        search.advance(frame)?;
    }
    Ok(search.finish())
}

/// Joint logits over the full alignment lattice of `labels`.
pub fn lattice<M: Matrix>(model: &Model<M>, enc_frames: &[Vec<M::Elem>], labels: &LabelSequence) -> Result<Lattice> {
    labels.check_classes(model.num_classes())?;
    let mut entries = vec![start_entry(model)?];
    for &l in labels.as_slice() {
        let next = extend_entry(model, entries.last().unwrap(), l)?;
        entries.push(next);
    }
    let enc_proj = enc_frames
        .iter()
        .map(|e| model.joint().project_encoder(e))
        .collect::<Result<Vec<_>>>()?;
    let classes = model.num_classes();
    let mut logits = vec![M::Elem::zero(); classes];
    Lattice::from_fn(enc_frames.len(), labels.len(), classes, |t, u, k| {
        if k == 0 {
            model.joint().combine(&enc_proj[t], &entries[u].joint_proj, &mut logits);
        }
        logits[k].to_f64_lossy()
    })
}

/// Result of scoring every label sequence up to a length bound with the
/// brute-force alignment sum.
#[derive(Clone, Debug, PartialEq)]
pub struct Exhaustive {
    pub best: Vec<u32>,
    pub best_log_prob: f64,
    pub runner_up_log_prob: f64,
    /// Total probability of the enumerated sequences.
    pub mass: f64,
}

impl Exhaustive {
    /// True when `best` provably beats every sequence, enumerated or not (its
    /// probability exceeds the mass left outside the enumeration), by at
    /// least `margin` nats over the runner-up.
    pub fn certified(&self, margin: f64) -> bool {
        self.best_log_prob.exp() > 1.0 - self.mass && self.best_log_prob - self.runner_up_log_prob >= margin
    }
}

/// Posterior argmax over all label sequences of length `0..=max_len`.
pub fn exhaustive_argmax<M: Matrix>(model: &Model<M>, enc_frames: &[Vec<M::Elem>], max_len: usize) -> Result<Exhaustive> {
    let classes = model.num_classes() as u32;
    let mut frontier: Vec<Vec<u32>> = vec![Vec::new()];
    let mut scored: Vec<(f64, Vec<u32>)> = Vec::new();
    for len in 0..=max_len {
        let mut next = Vec::new();
        for s in frontier {
            let y = LabelSequence::new(s.clone())?;
            let lp = -rnnt_loss_bruteforce(&lattice(model, enc_frames, &y)?, &y)?;
            scored.push((lp, s.clone()));
            if len < max_len {
                next.extend((1..classes).map(|k| {
                    let mut t = s.clone();
                    t.push(k);
                    t
                }));
            }
        }
        frontier = next;
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    let mass = scored.iter().map(|(lp, _)| lp.exp()).sum();
    let runner_up_log_prob = scored.get(1).map_or(f64::NEG_INFINITY, |s| s.0);
    let (best_log_prob, best) = scored.swap_remove(0);
    Ok(Exhaustive { best, best_log_prob, runner_up_log_prob, mass })
}

/// Incremental decoding session: raw feature frames in, partial results out.
pub struct StreamingDecoder<'m, M: Matrix> {
    model: &'m Model<M>,
    stacker: FrameStacker,
    lower: LowerState<M::Elem>,
    upper: UpperState<M::Elem>,
    search: Searcher<'m, M>,
}

impl<'m, M: Matrix> StreamingDecoder<'m, M> {
    pub fn new(model: &'m Model<M>, params: DecodeParams, fusion: &'m dyn FusionHook) -> Result<Self> {
        let cfg = model.config();
        Ok(StreamingDecoder {
            model,
            stacker: FrameStacker::new(cfg.feature_dim, cfg.frontend.left_context, cfg.frontend.downsample)?,
            lower: model.encoder().lower_state(),
            upper: model.encoder().upper_state(),
            search: Searcher::new(model, params, fusion)?,
        })
    }

    /// Feeds one raw feature frame. Returns the current best prefix whenever
    /// an encoder frame was completed.
    pub fn push_frame(&mut self, frame: &[f32]) -> Result<Option<Vec<u32>>> {
        let Some(stacked) = self.stacker.push(frame)? else { return Ok(None) };
        let x: Vec<M::Elem> = stacked.iter().map(|&v| M::Elem::from_f64_lossy(v as f64)).collect();
        let Some(reduced) = self.model.encoder().lower_step(&x, &mut self.lower)? else { return Ok(None) };
        let enc = self.model.encoder().upper_step(&reduced, &mut self.upper)?;
        self.search.advance(&enc)?;
        Ok(Some(self.search.best().to_vec()))
    }

    /// Flushes the partial reduction group and returns the final N-best.
    pub fn finish(mut self) -> Result<NBest> {
        if let Some(reduced) = self.model.encoder().flush(&mut self.lower) {
            let enc = self.model.encoder().upper_step(&reduced, &mut self.upper)?;
            self.search.advance(&enc)?;
        }
        if self.search.frames() == 0 {
            return Err(Error::Empty("feature stream"));
        }
        Ok(self.search.finish())
    }
}

#[cfg(test)]
mod tests;
