use super::*;
use crate::model::tests::tiny_config;
use crate::nn::Tensor2D;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model(seed: u64) -> Model<Tensor2D<f32>> {
    Model::random(tiny_config(4, 3), seed).unwrap()
}

fn features(t: usize, seed: u64) -> FeatureSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FeatureSequence::new(Tensor2D::from_fn(t, 3, |_, _| rng.random_range(-2.0..2.0)), 0.01)
}

/// Adds `shift` to the blank output bias (the last parameter vector's first
/// entry).
fn shift_blank<F: Float>(m: &mut Model<Tensor2D<F>>, shift: f64) {
    let mut flat = m.flatten();
    let at = flat.len() - m.num_classes();
    flat[at] += F::from_f64_lossy(shift);
    m.unflatten(&flat).unwrap();
}

fn params(beam: usize, cache: usize) -> DecodeParams {
    DecodeParams { beam_width: beam, cache_capacity: cache, ..DecodeParams::default() }
}

#[test]
fn beam_one_equals_greedy() {
    for seed in 0..10 {
        let m = model(seed);
        let f = features(17, seed + 100);
        let enc = encode(&m, &f).unwrap();
        let (greedy, score) = greedy_decode(&m, &enc, 3).unwrap();
        let nb = decode_utterance(&m, &f, &params(1, 64), &NoFusion).unwrap();
        assert_eq!(nb.best().ids, greedy);
        assert!((nb.best().score - score).abs() < 1e-9);
    }
}

#[test]
fn cache_capacity_does_not_change_results() {
    for seed in 0..5 {
        let m = model(seed);
        let f = features(23, seed);
        let reference = decode_utterance(&m, &f, &params(4, 0), &NoFusion).unwrap();
        for cap in [1, 3, 4096] {
            let got = decode_utterance(&m, &f, &params(4, cap), &NoFusion).unwrap();
            assert_eq!(got.entries, reference.entries);
            assert!(got.stats.steps <= reference.stats.steps);
        }
    }
}

#[test]
fn blank_dominant_model_outputs_nothing() {
    let mut m = model(3);
    shift_blank(&mut m, 50.0);
    let nb = decode_utterance(&m, &features(9, 1), &params(4, 16), &NoFusion).unwrap();
    assert!(nb.best().ids.is_empty());
}

#[test]
fn nbest_is_sorted_and_blank_free() {
    let m = model(4);
    let nb = decode_utterance(&m, &features(30, 2), &DecodeParams { nbest: 4, ..params(6, 64) }, &NoFusion).unwrap();
    assert!(nb.entries.len() <= 4);
    for w in nb.entries.windows(2) {
        assert!(w[0].score >= w[1].score);
    }
    assert!(nb.entries.iter().all(|e| !e.ids.contains(&0)));
    let text = nb.to_text();
    assert!(text.starts_with("1\t"));
    assert_eq!(text.lines().count(), nb.entries.len());
}

#[test]
fn streaming_matches_batch_and_reports_partials() {
    let m = model(5);
    let f = features(11, 8);
    let batch = decode_utterance(&m, &f, &params(4, 64), &NoFusion).unwrap();
    let fusion = NoFusion;
    let mut s = StreamingDecoder::new(&m, params(4, 64), &fusion).unwrap();
    let mut partials = 0;
    for t in 0..f.len() {
        if s.push_frame(f.frame(t)).unwrap().is_some() {
            partials += 1;
        }
    }
    let streamed = s.finish().unwrap();
    assert_eq!(partials, 5);
    assert_eq!(streamed.frames, 6);
    assert_eq!(streamed.entries, batch.entries);
}

#[test]
fn empty_input_is_an_error() {
    let m = model(1);
    let fusion = NoFusion;
    let s = StreamingDecoder::new(&m, params(2, 4), &fusion).unwrap();
    assert!(s.finish().is_err());
}

#[test]
fn lattice_loss_matches_model_probabilities() {
    // the greedy path's own probability is a lower bound on P(y|x)
    let m = Model::<Tensor2D<f64>>::random(tiny_config(3, 3), 9).unwrap();
    let enc = encode(&m, &features(6, 4)).unwrap();
    let (labels, score) = greedy_decode(&m, &enc, 3).unwrap();
    let y = LabelSequence::new(labels).unwrap();
    let lat = lattice(&m, &enc, &y).unwrap();
    let loss = crate::loss::rnnt_loss(&lat, &y).unwrap().loss;
    assert!(-loss >= score - 1e-9);
}

#[test]
fn wide_beam_finds_exhaustive_argmax_on_micro_models() {
    let mut checked = 0;
    let mut seed = 0;
    while checked < 10 {
        seed += 1;
        let mut m = Model::<Tensor2D<f64>>::random(tiny_config(2, 3), seed).unwrap();
        shift_blank(&mut m, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let width = m.encoder().config().output_dim();
        let enc: Vec<Vec<f64>> = (0..3).map(|_| (0..width).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let ex = exhaustive_argmax(&m, &enc, 3).unwrap();
        if !ex.certified(1e-3) {
            continue;
        }
        let best = ex.best;
        let mut search = Searcher::new(&m, params(8, 64), &NoFusion).unwrap();
        for e in &enc {
            search.advance(e).unwrap();
        }
        assert_eq!(search.finish().best().ids, best, "seed {seed}");
        checked += 1;
    }
}
