//! Desk-scale trainer: double-precision forward pass with traces, transducer
//! loss gradients at the logits, and hand-written backpropagation through the
//! joint network, the prediction network and the time-reduced encoder.

use std::thread;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{encode, lattice, SOS};
use crate::encoder::time_reduce;
use crate::error::{Error, Result};
use crate::loss::{rnnt_loss, LabelSequence, Lattice};
use crate::model::{Model, ModelConfig};
use crate::nn::{stack_frames, FeatureSequence, GateShift, LstmLayer, LstmState, StepTrace, Tensor2D};

use super::data::Utterance;

/// Double-precision model used for training.
pub type TrainModel = Model<Tensor2D<f64>>;

type T64 = Tensor2D<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Parameter updates.
    pub steps: usize,
    pub optimizer: Optimizer,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    /// Seed of the batch order.
    pub seed: u64,
    /// Worker threads computing per-utterance gradients.
    pub threads: usize,
    /// Steps between progress log lines; 0 disables them.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            batch_size: 8,
            steps: 100,
            optimizer: Optimizer::Sgd { momentum: 0.9 },
            grad_clip: 1.0,
            seed: 0,
            threads: 1,
            log_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        if self.batch_size == 0 || self.threads == 0 {
            return Err(Error::config("batch size and thread count must be at least 1"));
        }
        // also rejects NaN
        if !(self.grad_clip >= 0.0) {
            return Err(Error::config("gradient clip must be non-negative"));
        }
        Ok(())
    }
}

/// Steps per block when checking that the smoothed loss decreases.
pub const SMOOTHING_WINDOW: usize = 10;
/// Steps covered by the early-decrease diagnostic.
pub const DIAGNOSTIC_STEPS: usize = 100;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-utterance loss of each step's batch, in nats.
    pub losses: Vec<f64>,
    /// Hyperparameter warnings raised during training.
    pub diagnostics: Vec<String>,
}

impl TrainReport {
    /// Mean loss of the last `n` steps.
    pub fn tail_loss(&self, n: usize) -> f64 {
        let tail = &self.losses[self.losses.len().saturating_sub(n)..];
        tail.iter().sum::<f64>() / tail.len().max(1) as f64
    }
}

/// Block means of `losses` over windows of [`SMOOTHING_WINDOW`] steps.
pub fn smoothed(losses: &[f64]) -> Vec<f64> {
    losses.chunks_exact(SMOOTHING_WINDOW).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
}

fn lstm_forward(layer: &LstmLayer<T64>, xs: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Vec<StepTrace<f64>>)> {
    let mut state: LstmState<f64> = layer.zero_state();
    let mut outs = Vec::with_capacity(xs.len());
    let mut traces = Vec::with_capacity(xs.len());
    for x in xs {
        let (next, trace) = layer.step_traced(x, &state)?;
        outs.push(next.output.clone());
        traces.push(trace);
        state = next;
    }
    Ok((outs, traces))
}

/// Backpropagation through time for one layer. `d_out[t]` is the loss
/// gradient w.r.t. the layer output at `t` from everything above; returns the
/// gradient w.r.t. each input when `need_dx`.
fn lstm_backward(
    layer: &LstmLayer<T64>,
    g: &mut LstmLayer<T64>,
    traces: &[StepTrace<f64>],
    d_out: &[Vec<f64>],
    need_dx: bool,
) -> Vec<Vec<f64>> {
    let h = layer.units();
    let mut d_rec = vec![0.0; layer.output_width()];
    let mut dc_next = vec![0.0; h];
    let mut dx = if need_dx { vec![vec![0.0; layer.input_width()]; traces.len()] } else { Vec::new() };
    let mut dz = vec![0.0; 4 * h];
    for t in (0..traces.len()).rev() {
        let tr = &traces[t];
        let d_output: Vec<f64> = d_out[t].iter().zip(&d_rec).map(|(a, b)| a + b).collect();
        let d_hidden = match (&layer.projection, &mut g.projection) {
            (Some(p), Some(gp)) => {
                gp.outer_acc(&d_output, &tr.hidden);
                let mut dh = vec![0.0; h];
                p.matvec_t_acc(&d_output, &mut dh);
                dh
            }
            _ => d_output,
        };
        let (ig, rest) = tr.gates.split_at(h);
        let (fg, rest) = rest.split_at(h);
        let (gg, og) = rest.split_at(h);
        for k in 0..h {
            let ct = tr.cell_tanh[k];
            let d_o = d_hidden[k] * ct;
            let dc = dc_next[k] + d_hidden[k] * og[k] * (1.0 - ct * ct);
            dz[k] = dc * gg[k] * ig[k] * (1.0 - ig[k]);
            dz[h + k] = dc * tr.prev_cell[k] * fg[k] * (1.0 - fg[k]);
            dz[2 * h + k] = dc * ig[k] * (1.0 - gg[k] * gg[k]);
            dz[3 * h + k] = d_o * og[k] * (1.0 - og[k]);
            dc_next[k] = dc * fg[k];
        }
        match (&layer.shift, &mut g.shift) {
            (GateShift::Bias(_), GateShift::Bias(gb)) => {
                gb.iter_mut().zip(&dz).for_each(|(a, b)| *a += b);
            }
            (GateShift::Norm { gain, .. }, GateShift::Norm { gain: g_gain, bias: g_bias }) => {
                for k in 0..4 * h {
                    g_gain[k] += dz[k] * tr.normalized[k];
                    g_bias[k] += dz[k];
                    dz[k] *= gain[k];
                }
                for (blk, (d, xh)) in dz.chunks_exact_mut(h).zip(tr.normalized.chunks_exact(h)).enumerate() {
                    let m1 = d.iter().sum::<f64>() / h as f64;
                    let m2 = d.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / h as f64;
                    let inv = tr.inv_std[blk];
                    for (a, &x) in d.iter_mut().zip(xh) {
                        *a = inv * (*a - m1 - x * m2);
                    }
                }
            }
            _ => unreachable!("gradient model mirrors the model"),
        }
        g.input.outer_acc(&dz, &tr.input);
        g.recurrent.outer_acc(&dz, &tr.prev_output);
        d_rec.iter_mut().for_each(|v| *v = 0.0);
        layer.recurrent.matvec_t_acc(&dz, &mut d_rec);
        if need_dx {
            layer.input.matvec_t_acc(&dz, &mut dx[t]);
        }
    }
    dx
}

fn stacked_input(model: &TrainModel, features: &FeatureSequence) -> Result<Vec<Vec<f64>>> {
    let fe = &model.config().frontend;
    let s = stack_frames(features, fe.left_context, fe.downsample)?;
    Ok((0..s.len()).map(|t| s.frame(t).iter().map(|&v| v as f64).collect()).collect())
}

/// Transducer loss of one utterance, adding its parameter gradient to `grad`.
pub fn loss_and_grad(
    model: &TrainModel,
    features: &FeatureSequence,
    labels: &LabelSequence,
    grad: &mut TrainModel,
) -> Result<f64> {
    let cfg = model.config();
    let ecfg = &cfg.encoder;
    let split = ecfg.reduction_after_layer;

    // encoder forward
    let input = stacked_input(model, features)?;
    if input.is_empty() {
        return Err(Error::Empty("feature sequence"));
    }
    let lower_len = input.len();
    let mut xs = input;
    let mut enc_traces = Vec::with_capacity(ecfg.num_layers);
    for (i, layer) in model.encoder.layers.iter().enumerate() {
        if i == split {
            xs = time_reduce(&xs, ecfg.reduction_factor)?;
        }
        let (outs, traces) = lstm_forward(layer, &xs)?;
        enc_traces.push(traces);
        xs = outs;
    }
    let enc = xs;

    // prediction forward over ⟨sos⟩, y1..yU
    labels.check_classes(model.num_classes())?;
    let symbols: Vec<u32> = std::iter::once(SOS).chain(labels.as_slice().iter().copied()).collect();
    let emb = &model.prediction.embedding;
    let mut ps: Vec<Vec<f64>> = symbols.iter().map(|&s| emb.row(s as usize).to_vec()).collect();
    let mut pred_traces = Vec::with_capacity(model.prediction.layers.len());
    for layer in &model.prediction.layers {
        let (outs, traces) = lstm_forward(layer, &ps)?;
        pred_traces.push(traces);
        ps = outs;
    }
    let pred = ps;

    // joint forward
    let joint = &model.joint;
    let enc_proj: Vec<Vec<f64>> = enc.iter().map(|e| joint.project_encoder(e)).collect::<Result<_>>()?;
    let pred_proj: Vec<Vec<f64>> = pred.iter().map(|p| joint.project_prediction(p)).collect::<Result<_>>()?;
    let (frames, targets, classes) = (enc.len(), labels.len(), model.num_classes());
    let hidden_of = |t: usize, u: usize| -> Vec<f64> {
        enc_proj[t].iter().zip(&pred_proj[u]).map(|(a, b)| (a + b).tanh()).collect()
    };
    let mut logits = Vec::with_capacity(frames * (targets + 1) * classes);
    for t in 0..frames {
        for u in 0..=targets {
            let hid = hidden_of(t, u);
            let mut z = joint.output.matvec(&hid);
            z.iter_mut().zip(&joint.output_bias).for_each(|(a, b)| *a += b);
            logits.extend(z);
        }
    }
    let lat = Lattice::new(frames, targets, classes, logits)?;
    let out = rnnt_loss(&lat, labels)?;
    let dlogits = &out.posteriors.grad;

    // joint backward
    let hd = joint.hidden();
    let mut d_ep = vec![vec![0.0; hd]; frames];
    let mut d_pp = vec![vec![0.0; hd]; targets + 1];
    let gj = &mut grad.joint;
    let mut dh = vec![0.0; hd];
    for t in 0..frames {
        for u in 0..=targets {
            let base = lat.index(t, u);
            let g = &dlogits[base..base + classes];
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            let hid = hidden_of(t, u);
            gj.output.outer_acc(g, &hid);
            gj.output_bias.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            dh.iter_mut().for_each(|v| *v = 0.0);
            joint.output.matvec_t_acc(g, &mut dh);
            for k in 0..hd {
                let da = dh[k] * (1.0 - hid[k] * hid[k]);
                d_ep[t][k] += da;
                d_pp[u][k] += da;
            }
        }
    }
    let mut d_enc = vec![vec![0.0; ecfg.output_dim()]; frames];
    for t in 0..frames {
        gj.encoder_proj.outer_acc(&d_ep[t], &enc[t]);
        joint.encoder_proj.matvec_t_acc(&d_ep[t], &mut d_enc[t]);
    }
    let mut d_pred = vec![vec![0.0; cfg.prediction.output_dim()]; targets + 1];
    for u in 0..=targets {
        gj.prediction_proj.outer_acc(&d_pp[u], &pred[u]);
        gj.bias.iter_mut().zip(&d_pp[u]).for_each(|(a, b)| *a += b);
        joint.prediction_proj.matvec_t_acc(&d_pp[u], &mut d_pred[u]);
    }

    // prediction backward
    let mut d = d_pred;
    let n_pred = model.prediction.layers.len();
    for i in (0..n_pred).rev() {
        d = lstm_backward(&model.prediction.layers[i], &mut grad.prediction.layers[i], &pred_traces[i], &d, true);
    }
    for (&s, dx) in symbols.iter().zip(&d) {
        grad.prediction.embedding.row_mut(s as usize).iter_mut().zip(dx).for_each(|(a, b)| *a += b);
    }

    // encoder backward, splitting reduced-frame gradients back into groups
    let mut d = d_enc;
    for i in (0..ecfg.num_layers).rev() {
        d = lstm_backward(&model.encoder.layers[i], &mut grad.encoder.layers[i], &enc_traces[i], &d, i > 0);
        if i == split {
            let n = ecfg.reduction_factor;
            let width = ecfg.layer_input_dim(split) / n;
            let mut lower = Vec::with_capacity(lower_len);
            for group in &d {
                for chunk in group.chunks_exact(width) {
                    if lower.len() < lower_len {
                        lower.push(chunk.to_vec());
                    }
                }
            }
            d = lower;
        }
    }
    Ok(out.loss)
}

/// Forward-only loss through the inference code path.
pub fn utterance_loss(model: &TrainModel, features: &FeatureSequence, labels: &LabelSequence) -> Result<f64> {
    let enc = encode(model, features)?;
    Ok(rnnt_loss(&lattice(model, &enc, labels)?, labels)?.loss)
}

/// Summed loss and gradient of a batch, reduced in utterance order so the
/// result does not depend on the thread count.
pub fn batch_loss_and_grad(model: &TrainModel, batch: &[&Utterance], threads: usize) -> Result<(f64, Vec<f64>)> {
    let per_utt = |u: &Utterance| -> Result<(f64, Vec<f64>)> {
        let mut g = model.zeros_like();
        let loss = loss_and_grad(model, &u.features, &u.labels, &mut g)?;
        Ok((loss, g.flatten()))
    };
    let results: Vec<Result<(f64, Vec<f64>)>> = if threads <= 1 || batch.len() <= 1 {
        batch.iter().map(|u| per_utt(u)).collect()
    } else {
        let chunk = batch.len().div_ceil(threads);
        thread::scope(|s| {
            let handles: Vec<_> = batch
                .chunks(chunk)
                .map(|c| s.spawn(move || c.iter().map(|u| per_utt(u)).collect::<Vec<_>>()))
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("gradient worker panicked")).collect()
        })
    };
    let mut total = 0.0;
    let mut sum: Vec<f64> = Vec::new();
    for r in results {
        let (loss, g) = r?;
        total += loss;
        if sum.is_empty() {
            sum = g;
        } else {
            sum.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
    }
    Ok((total, sum))
}

struct OptState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

fn apply_update(params: &mut [f64], grad: &[f64], cfg: &TrainConfig, st: &mut OptState) {
    let lr = cfg.learning_rate;
    match cfg.optimizer {
        Optimizer::Sgd { momentum } => {
            for ((p, &g), m) in params.iter_mut().zip(grad).zip(st.m.iter_mut()) {
                *m = momentum * *m + g;
                *p -= lr * *m;
            }
        }
        Optimizer::Adam { beta1, beta2, epsilon } => {
            st.t += 1;
            let c1 = 1.0 - beta1.powi(st.t);
            let c2 = 1.0 - beta2.powi(st.t);
            for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(st.m.iter_mut()).zip(st.v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + epsilon);
            }
        }
    }
}

/// Gradient descent on the mean per-utterance loss. Batches are drawn from a
/// seeded shuffle, reshuffled every epoch. `on_step` sees each step's mean
/// loss.
pub fn train(
    model: &mut TrainModel,
    data: &[Utterance],
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(usize, f64),
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut pos = order.len();
    let mut params = model.flatten();
    let mut st = OptState { m: vec![0.0; params.len()], v: vec![0.0; params.len()], t: 0 };
    let mut report = TrainReport::default();
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(data.len()) {
            if pos == order.len() {
                order.shuffle(&mut rng);
                pos = 0;
            }
            batch.push(&data[order[pos]]);
            pos += 1;
        }
        let (total, mut grad) = batch_loss_and_grad(model, &batch, cfg.threads)?;
        let n = batch.len() as f64;
        let loss = total / n;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { step, loss });
        }
        grad.iter_mut().for_each(|g| *g /= n);
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
            let s = cfg.grad_clip / norm;
            grad.iter_mut().for_each(|g| *g *= s);
        }
        apply_update(&mut params, &grad, cfg, &mut st);
        model.unflatten(&params)?;
        report.losses.push(loss);
        on_step(step, loss);
        if cfg.log_every > 0 && (step + 1) % cfg.log_every == 0 {
            info!("step {} loss {:.4} (last {} mean {:.4})", step + 1, loss, cfg.log_every, report.tail_loss(cfg.log_every));
        }
        if step + 1 == DIAGNOSTIC_STEPS {
            check_early_decrease(&mut report);
        }
    }
    Ok(report)
}

fn check_early_decrease(report: &mut TrainReport) {
    let s = smoothed(&report.losses[..DIAGNOSTIC_STEPS]);
    if let Some(w) = s.windows(2).position(|w| w[1] > w[0]) {
        let msg = format!(
            "smoothed loss rose from {:.4} to {:.4} around step {}; the learning rate may be too high",
            s[w],
            s[w + 1],
            (w + 1) * SMOOTHING_WINDOW
        );
        warn!("{msg}");
        report.diagnostics.push(msg);
    }
}

/// Max relative error between backpropagated and central-difference
/// parameter gradients of one utterance.
pub fn model_grad_check(
    model: &TrainModel,
    features: &FeatureSequence,
    labels: &LabelSequence,
    epsilon: f64,
) -> Result<f64> {
    let mut g = model.zeros_like();
    loss_and_grad(model, features, labels, &mut g)?;
    let analytic = g.flatten();
    let mut params = model.flatten();
    let mut probe = model.clone();
    crate::loss::finite_difference_check(&mut params, &analytic, epsilon, |p| {
        probe.unflatten(p)?;
        utterance_loss(&probe, features, labels)
    })
}

/// A fresh double-precision model.
pub fn init_model(config: ModelConfig, seed: u64) -> Result<TrainModel> {
    Model::random(config, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_config;
    use crate::nn::Tensor2D;
    use rand::Rng;

    fn sample(rng: &mut ChaCha8Rng, t: usize, d: usize, labels: Vec<u32>) -> Utterance {
        Utterance {
            id: "x".into(),
            features: FeatureSequence::new(Tensor2D::from_fn(t, d, |_, _| rng.random_range(-1.0..1.0)), 0.01),
            labels: LabelSequence::new(labels).unwrap(),
        }
    }

    #[test]
    fn backprop_matches_inference_loss() {
        let m = init_model(tiny_config(4, 3), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = sample(&mut rng, 7, 3, vec![2, 1, 4]);
        let mut g = m.zeros_like();
        let a = loss_and_grad(&m, &u.features, &u.labels, &mut g).unwrap();
        let b = utterance_loss(&m, &u.features, &u.labels).unwrap();
        assert!((a - b).abs() < 1e-12 * b.abs().max(1.0), "{a} vs {b}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (seed, t, labels) in [(1, 5, vec![1, 3]), (2, 6, vec![2, 2, 1]), (3, 3, vec![])] {
            let m = init_model(tiny_config(3, 3), seed).unwrap();
            let u = sample(&mut rng, t, 3, labels);
            let err = model_grad_check(&m, &u.features, &u.labels, 1e-4).unwrap();
            assert!(err < 1e-4, "seed {seed}: max relative error {err}");
        }
    }

    #[test]
    fn thread_count_does_not_change_gradients() {
        let m = init_model(tiny_config(4, 3), 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let utts: Vec<Utterance> = (0..5).map(|i| sample(&mut rng, 4 + i, 3, vec![1 + i as u32 % 4])).collect();
        let batch: Vec<&Utterance> = utts.iter().collect();
        let (l1, g1) = batch_loss_and_grad(&m, &batch, 1).unwrap();
        let (l3, g3) = batch_loss_and_grad(&m, &batch, 3).unwrap();
        assert_eq!(l1.to_bits(), l3.to_bits());
        assert_eq!(g1, g3);
    }

    #[test]
    fn memorizes_one_sample() {
        let mut m = init_model(tiny_config(4, 3), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = vec![sample(&mut rng, 8, 3, vec![3, 1])];
        let cfg = TrainConfig {
            learning_rate: 0.02,
            batch_size: 1,
            steps: 300,
            optimizer: Optimizer::adam(),
            ..Default::default()
        };
        let report = train(&mut m, &data, &cfg, &mut |_, _| {}).unwrap();
        assert!(*report.losses.last().unwrap() < 0.1, "final loss {}", report.losses.last().unwrap());
    }

    #[test]
    fn training_is_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<Utterance> = (0..6).map(|i| sample(&mut rng, 6, 3, vec![1 + i % 4, 2])).collect();
        let cfg = TrainConfig { steps: 10, batch_size: 3, ..Default::default() };
        let run = || {
            let mut m = init_model(tiny_config(4, 3), 8).unwrap();
            train(&mut m, &data, &cfg, &mut |_, _| {}).unwrap();
            m.flatten()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn divergence_is_reported() {
        let mut m = init_model(tiny_config(4, 3), 9).unwrap();
        m.joint.output_bias[0] = f64::NAN;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data = vec![sample(&mut rng, 5, 3, vec![1])];
        let err = train(&mut m, &data, &TrainConfig { steps: 3, ..Default::default() }, &mut |_, _| {});
        assert!(matches!(err, Err(Error::Diverged { step: 0, .. })));
    }

    #[test]
    fn diagnostic_fires_on_rising_loss() {
        let mut report = TrainReport { losses: (0..100).map(|i| 1.0 + i as f64 * 0.01).collect(), ..Default::default() };
        check_early_decrease(&mut report);
        assert_eq!(report.diagnostics.len(), 1);
        let mut ok = TrainReport { losses: (0..100).map(|i| 2.0 - i as f64 * 0.01).collect(), ..Default::default() };
        check_early_decrease(&mut ok);
        assert!(ok.diagnostics.is_empty());
    }
}
