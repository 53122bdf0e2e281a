//! Default toy-task model and training settings, and corpus evaluation.

use std::sync::Arc;

use rand::Rng;
use serde::Serialize;

use crate::biasing::{ContextFst, ShallowFusion, SubwordInventory};
use crate::decoder::{decode_utterance, DecodeParams, FusionHook, JointConfig, NoFusion, PredictionConfig};
use crate::encoder::EncoderConfig;
use crate::error::Result;
use crate::loss::LabelSequence;
use crate::model::{FrontendConfig, Model, ModelConfig};
use crate::nn::Matrix;

use super::data::{toy_vocabulary, ToyTask, ToyTaskSpec, Utterance};
use super::train::{Optimizer, TrainConfig};
use super::wer::{wer, WerStats};

/// Model sized for the toy task: three encoder layers with 2× time reduction
/// after the second, a one-layer prediction network.
pub fn toy_model_config(spec: &ToyTaskSpec) -> ModelConfig {
    let left_context = 1;
    ModelConfig {
        feature_dim: spec.feature_dim,
        frontend: FrontendConfig { left_context, downsample: 1 },
        encoder: EncoderConfig {
            input_dim: spec.feature_dim * (left_context + 1),
            num_layers: 3,
            units: 32,
            projection_dim: 0,
            reduction_factor: 2,
            reduction_after_layer: 2,
            layer_norm: true,
        },
        prediction: PredictionConfig {
            embedding_dim: 16,
            num_layers: 1,
            units: 32,
            projection_dim: 0,
            layer_norm: true,
        },
        joint: JointConfig { hidden: 32 },
        vocabulary: toy_vocabulary(spec.vocab_size),
    }
}

pub fn toy_train_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 0.005,
        batch_size: 32,
        steps: 800,
        optimizer: Optimizer::adam(),
        grad_clip: 1.0,
        seed: 0,
        threads: 1,
        log_every: 100,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalResult {
    pub stats: WerStats,
    /// Utterances whose best hypothesis equals the reference exactly.
    pub exact: usize,
    pub utterances: usize,
    pub hypotheses: Vec<Vec<u32>>,
}

impl EvalResult {
    pub fn accuracy(&self) -> f64 {
        self.exact as f64 / self.utterances.max(1) as f64
    }
}

pub fn evaluate<M: Matrix>(
    model: &Model<M>,
    utts: &[Utterance],
    params: &DecodeParams,
    fusion: &dyn FusionHook,
) -> Result<EvalResult> {
    let mut stats = WerStats::default();
    let mut exact = 0;
    let mut hypotheses = Vec::with_capacity(utts.len());
    for u in utts {
        let nbest = decode_utterance(model, &u.features, params, fusion)?;
        let hyp = nbest.best().ids.clone();
        stats.add(&wer(u.labels.as_slice(), &hyp));
        exact += usize::from(hyp == u.labels.as_slice());
        hypotheses.push(hyp);
    }
    Ok(EvalResult { stats, exact, utterances: utts.len(), hypotheses })
}

/// Biasing scenario on the toy task: a few fixed random label sequences act
/// as rare "names". Phrase-bearing utterances embed one name between short
/// random fillers and render the name's labels with extra noise, so the
/// acoustics alone are often not enough to recover it.
#[derive(Clone, Debug, PartialEq)]
pub struct NameScenario {
    pub names: Vec<Vec<u32>>,
    /// Noise level of the name segment.
    pub name_noise: f64,
    /// Inclusive bound on filler labels before and after the name.
    pub max_filler: usize,
}

impl NameScenario {
    /// `count` names of `len` labels drawn from the task's stream `stream`.
    pub fn random(task: &ToyTask, count: usize, len: usize, name_noise: f64, stream: u64) -> Self {
        let mut rng = task.rng(stream);
        let v = task.spec().vocab_size as u32;
        let names = (0..count).map(|_| (0..len).map(|_| rng.random_range(1..=v)).collect()).collect();
        NameScenario { names, name_noise, max_filler: 2 }
    }

    /// Phrase words `name0`, `name1`, ... and their spellings.
    pub fn inventory(&self) -> (SubwordInventory, Vec<String>) {
        let mut inv = SubwordInventory::new();
        let mut phrases = Vec::new();
        for (i, n) in self.names.iter().enumerate() {
            inv.insert(format!("name{i}"), n.clone());
            phrases.push(format!("name{i}"));
        }
        (inv, phrases)
    }

    /// `count` phrase-bearing and `count` phrase-free utterances from stream
    /// `stream`.
    pub fn generate(&self, task: &ToyTask, count: usize, stream: u64) -> Result<(Vec<Utterance>, Vec<Utterance>)> {
        let mut rng = task.rng(stream);
        let v = task.spec().vocab_size as u32;
        let base = task.spec().noise;
        let mut with = Vec::with_capacity(count);
        let mut without = Vec::with_capacity(count);
        for i in 0..count {
            let name = &self.names[rng.random_range(0..self.names.len())];
            let pre: Vec<u32> = (0..rng.random_range(0..=self.max_filler)).map(|_| rng.random_range(1..=v)).collect();
            let post: Vec<u32> = (0..rng.random_range(0..=self.max_filler)).map(|_| rng.random_range(1..=v)).collect();
            let labels: Vec<u32> = pre.iter().chain(name).chain(&post).copied().collect();
            let mut noise = vec![base; labels.len()];
            noise[pre.len()..pre.len() + name.len()].iter_mut().for_each(|s| *s = self.name_noise);
            let features = task.render_with_noise(&labels, &noise, &mut rng)?;
            with.push(Utterance { id: format!("name{i:05}"), features, labels: LabelSequence::new(labels)? });
            let labels = task.sample_labels(&mut rng);
            let features = task.render(&labels, &mut rng)?;
            without.push(Utterance { id: format!("plain{i:05}"), features, labels: LabelSequence::new(labels)? });
        }
        Ok((with, without))
    }
}

/// One point of a fusion-weight sweep.
#[derive(Clone, Debug, Serialize)]
pub struct LambdaPoint {
    pub lambda: f64,
    pub phrase_wer: f64,
    pub plain_wer: f64,
}

/// Sweeps `grid` on a development pair of sets and picks the weight with the
/// lowest phrase-set WER among those that raise the phrase-free WER by at most
/// `max_plain_increase` points over `lambda = 0`; ties go to the smaller
/// weight. Returns the choice and the sweep (starting with `lambda = 0`).
pub fn tune_lambda<M: Matrix>(
    model: &Model<M>,
    fst: &Arc<ContextFst>,
    phrase_dev: &[Utterance],
    plain_dev: &[Utterance],
    grid: &[f64],
    params: &DecodeParams,
    max_plain_increase: f64,
) -> Result<(f64, Vec<LambdaPoint>)> {
    let point = |lambda: f64| -> Result<LambdaPoint> {
        let (phrase_wer, plain_wer) = if lambda == 0.0 {
            (evaluate(model, phrase_dev, params, &NoFusion)?.stats.wer(), evaluate(model, plain_dev, params, &NoFusion)?.stats.wer())
        } else {
            let fusion = ShallowFusion::new(fst.clone(), lambda)?;
            (evaluate(model, phrase_dev, params, &fusion)?.stats.wer(), evaluate(model, plain_dev, params, &fusion)?.stats.wer())
        };
        Ok(LambdaPoint { lambda, phrase_wer, plain_wer })
    };
    let mut sweep = vec![point(0.0)?];
    for &l in grid {
        sweep.push(point(l)?);
    }
    let base = &sweep[0];
    let best = sweep
        .iter()
        .filter(|p| p.plain_wer - base.plain_wer <= max_plain_increase)
        .min_by(|a, b| a.phrase_wer.total_cmp(&b.phrase_wer).then(a.lambda.total_cmp(&b.lambda)))
        .map_or(0.0, |p| p.lambda);
    Ok((best, sweep))
}
