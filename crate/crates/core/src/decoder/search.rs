use num_traits::Zero;
use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::loss::BLANK;
use crate::model::Model;
use crate::nn::{log_softmax_in_place, logaddexp, Float, Matrix};

use super::cache::{extend_entry, pred_forward, CacheStats, PredCache, PredEntry};

/// External per-label score added during search. `transition` returns the
/// successor state and the already-weighted score increment; it must be a
/// pure function of its arguments.
pub trait FusionHook: Send + Sync {
    fn start(&self) -> u32 {
        0
    }

    fn transition(&self, state: u32, label: u32) -> (u32, f64);

    /// Correction applied to a hypothesis that ends in `state`.
    fn finalize(&self, _state: u32) -> f64 {
        0.0
    }
}

/// The identity hook.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoFusion;

impl FusionHook for NoFusion {
    fn transition(&self, state: u32, _label: u32) -> (u32, f64) {
        (state, 0.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeParams {
    pub beam_width: usize,
    /// Labels a hypothesis may emit within one encoder frame.
    pub max_expansions_per_frame: usize,
    /// Prediction-state cache entries; 0 disables caching.
    pub cache_capacity: usize,
    /// Hypotheses returned at the end; 0 means the beam width.
    pub nbest: usize,
}

impl Default for DecodeParams {
    fn default() -> Self {
        DecodeParams { beam_width: 4, max_expansions_per_frame: 3, cache_capacity: 4096, nbest: 0 }
    }
}

impl DecodeParams {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 {
            return Err(Error::config("beam width must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Hypothesis<F> {
    pub prefix: Vec<u32>,
    /// Model log-probability plus fusion increments.
    pub score: f64,
    /// Fusion-hook state.
    pub context: u32,
    pub pred: Arc<PredEntry<F>>,
}

struct Candidate {
    source: usize,
    symbol: u32,
    score: f64,
    context: u32,
}

fn candidate_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.score.total_cmp(&a.score).then(a.source.cmp(&b.source)).then(a.symbol.cmp(&b.symbol))
}

fn hypothesis_order<F>(a: &Hypothesis<F>, b: &Hypothesis<F>) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.prefix.cmp(&b.prefix))
}

pub(crate) fn log_probs<M: Matrix>(model: &Model<M>, enc_proj: &[M::Elem], pred: &PredEntry<M::Elem>) -> Vec<f64> {
    let mut logits = vec![M::Elem::zero(); model.num_classes()];
    model.joint().combine(enc_proj, &pred.joint_proj, &mut logits);
    let mut lp: Vec<f64> = logits.iter().map(|v| v.to_f64_lossy()).collect();
    log_softmax_in_place(&mut lp);
    lp
}

/// Consumes one encoder frame.
///
/// Expansion runs in levels. At each level every live hypothesis proposes a
/// blank (which finishes it for this frame) and, below the expansion cap,
/// each label; the best `beam_width` proposals survive. Finished hypotheses
/// sharing a prefix are merged by log-sum, and the result is pruned to
/// `beam_width`.
pub fn decode_step<M: Matrix>(
    model: &Model<M>,
    beam: &[Hypothesis<M::Elem>],
    enc_frame: &[M::Elem],
    params: &DecodeParams,
    fusion: &dyn FusionHook,
    cache: &mut PredCache<M::Elem>,
) -> Result<Vec<Hypothesis<M::Elem>>> {
    if beam.is_empty() {
        return Err(Error::Empty("beam"));
    }
    let enc_proj = model.joint().project_encoder(enc_frame)?;
    let classes = model.num_classes() as u32;
    let mut done: Vec<Hypothesis<M::Elem>> = Vec::new();
    let mut index: HashMap<Vec<u32>, usize> = HashMap::new();
    let mut live = beam.to_vec();
    for level in 0..=params.max_expansions_per_frame {
        if live.is_empty() {
            break;
        }
        let mut cands = Vec::with_capacity(live.len() * classes as usize);
        for (source, h) in live.iter().enumerate() {
            let lp = log_probs(model, &enc_proj, &h.pred);
            cands.push(Candidate { source, symbol: BLANK, score: h.score + lp[BLANK as usize], context: h.context });
            if level < params.max_expansions_per_frame {
                for k in 1..classes {
                    let (context, delta) = fusion.transition(h.context, k);
                    cands.push(Candidate { source, symbol: k, score: h.score + lp[k as usize] + delta, context });
                }
            }
        }
        cands.sort_by(candidate_order);
        cands.truncate(params.beam_width);
        let mut next_live = Vec::new();
        for c in cands {
            let parent = &live[c.source];
            if c.symbol == BLANK {
                match index.get(&parent.prefix) {
                    Some(&i) => done[i].score = logaddexp(done[i].score, c.score),
                    None => {
                        index.insert(parent.prefix.clone(), done.len());
                        done.push(Hypothesis { score: c.score, ..parent.clone() });
                    }
                }
            } else {
                let mut prefix = parent.prefix.clone();
                prefix.push(c.symbol);
                let pred = match cache.get(&prefix) {
                    Some(e) => e,
                    None => {
                        cache.count_step();
                        let e = Arc::new(extend_entry(model, &parent.pred, c.symbol)?);
                        cache.insert(prefix.clone(), e.clone());
                        e
                    }
                };
                next_live.push(Hypothesis { prefix, score: c.score, context: c.context, pred });
            }
        }
        live = next_live;
    }
    done.sort_by(hypothesis_order);
    done.truncate(params.beam_width);
    Ok(done)
}

/// Frame-synchronous beam search over a stream of encoder frames.
pub struct Searcher<'m, M: Matrix> {
    model: &'m Model<M>,
    params: DecodeParams,
    fusion: &'m dyn FusionHook,
    beam: Vec<Hypothesis<M::Elem>>,
    cache: PredCache<M::Elem>,
    frames: usize,
}

impl<'m, M: Matrix> Searcher<'m, M> {
    pub fn new(model: &'m Model<M>, params: DecodeParams, fusion: &'m dyn FusionHook) -> Result<Self> {
        params.validate()?;
        let mut cache = PredCache::new(params.cache_capacity);
        let start = pred_forward(model, &[], &mut cache)?;
        let beam = vec![Hypothesis { prefix: Vec::new(), score: 0.0, context: fusion.start(), pred: start }];
        Ok(Searcher { model, params, fusion, beam, cache, frames: 0 })
    }

    pub fn advance(&mut self, enc_frame: &[M::Elem]) -> Result<()> {
        self.beam = decode_step(self.model, &self.beam, enc_frame, &self.params, self.fusion, &mut self.cache)?;
        self.frames += 1;
        Ok(())
    }

    pub fn beam(&self) -> &[Hypothesis<M::Elem>] {
        &self.beam
    }

    /// Current top prefix.
    pub fn best(&self) -> &[u32] {
        &self.beam[0].prefix
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn stats(&self) -> CacheStats {
        self.cache.stats()
    }

    pub fn finish(self) -> NBest {
        let mut entries: Vec<NBestEntry> = self
            .beam
            .iter()
            .map(|h| NBestEntry {
                ids: h.prefix.clone(),
                score: h.score + self.fusion.finalize(h.context),
                text: self.model.detokenize(&h.prefix),
            })
            .collect();
        entries.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.ids.cmp(&b.ids)));
        let keep = if self.params.nbest == 0 { self.params.beam_width } else { self.params.nbest };
        entries.truncate(keep);
        NBest { entries, frames: self.frames, stats: self.cache.stats() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NBestEntry {
    pub ids: Vec<u32>,
    pub score: f64,
    pub text: String,
}

/// Final hypotheses, best first.
#[derive(Clone, Debug, PartialEq)]
pub struct NBest {
    pub entries: Vec<NBestEntry>,
    /// Encoder frames consumed.
    pub frames: usize,
    pub stats: CacheStats,
}

impl NBest {
    pub fn best(&self) -> &NBestEntry {
        &self.entries[0]
    }

    /// One `rank<TAB>score<TAB>ids<TAB>text` line per hypothesis, rank from 1.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (rank, e) in self.entries.iter().enumerate() {
            let ids = e.ids.iter().map(u32::to_string).collect::<Vec<_>>().join(" ");
            writeln!(out, "{}\t{:.6}\t{}\t{}", rank + 1, e.score, ids, e.text).unwrap();
        }
        out
    }
}

/// Argmax decoding: per frame, emit the most likely label until blank wins or
/// `max_expansions` labels were emitted. Returns labels and log-probability.
pub fn greedy_decode<M: Matrix>(
    model: &Model<M>,
    enc_frames: &[Vec<M::Elem>],
    max_expansions: usize,
) -> Result<(Vec<u32>, f64)> {
    let mut cache = PredCache::new(0);
    let mut pred = pred_forward(model, &[], &mut cache)?;
    let mut labels = Vec::new();
    let mut score = 0.0;
    for enc in enc_frames {
        let enc_proj = model.joint().project_encoder(enc)?;
        for emitted in 0..=max_expansions {
            let lp = log_probs(model, &enc_proj, &pred);
            let mut k = BLANK as usize;
            if emitted < max_expansions {
                for (j, &v) in lp.iter().enumerate() {
                    if v > lp[k] {
                        k = j;
                    }
                }
            }
            score += lp[k];
            if k == BLANK as usize {
                break;
            }
            labels.push(k as u32);
            pred = Arc::new(extend_entry(model, &pred, k as u32)?);
        }
    }
    Ok((labels, score))
}
