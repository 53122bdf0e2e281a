mod common;

use proptest::prelude::*;

use rnnt::decoder::encode;
use rnnt::encoder::time_reduce;
use rnnt::nn::{stack_frames, FeatureSequence, Tensor2D};

use common::{micro_model, random_features};

/// Lower and upper encoder halves driven one frame at a time, with a flush.
fn streamed(model: &rnnt::model::FloatModel, f: &FeatureSequence) -> Vec<Vec<f32>> {
    let fe = &model.config().frontend;
    let stacked = stack_frames(f, fe.left_context, fe.downsample).unwrap();
    let enc = model.encoder();
    let (mut lower, mut upper) = (enc.lower_state(), enc.upper_state());
    let mut out = Vec::new();
    for t in 0..stacked.len() {
        if let Some(r) = enc.lower_step(stacked.frame(t), &mut lower).unwrap() {
            out.push(enc.upper_step(&r, &mut upper).unwrap());
        }
    }
    if let Some(r) = enc.flush(&mut lower) {
        out.push(enc.upper_step(&r, &mut upper).unwrap());
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn time_reduce_groups_frames(frames in 1usize..100, dim in 1usize..4, n in 1usize..5) {
        let x: Vec<Vec<u32>> = (0..frames).map(|t| (0..dim).map(|c| (t * dim + c + 1) as u32).collect()).collect();
        let y = time_reduce(&x, n).unwrap();
        prop_assert_eq!(y.len(), frames.div_ceil(n));
        let flat: Vec<u32> = y.concat();
        let mut want: Vec<u32> = x.concat();
        want.resize(frames.div_ceil(n) * n * dim, 0);
        prop_assert_eq!(flat, want);
    }

    #[test]
    fn streamed_equals_batch(frames in 1usize..30, seed in any::<u64>()) {
        let model = micro_model(3, seed);
        let f = random_features(frames, 3, seed ^ 1);
        let batch = encode(&model, &f).unwrap();
        prop_assert_eq!(batch.len(), frames.div_ceil(2));
        prop_assert_eq!(streamed(&model, &f), batch);
    }

    /// Output frame j depends on input frames up to 2(j+1) only.
    #[test]
    fn encoder_is_causal(frames in 2usize..30, cut in 1usize..30, seed in any::<u64>()) {
        let cut = cut.min(frames);
        let model = micro_model(3, seed);
        let f = random_features(frames, 3, seed ^ 2);
        let prefix = FeatureSequence::new(Tensor2D::from_vec(cut, 3, f.frames.data()[..cut * 3].to_vec()).unwrap(), 0.01);
        let full = encode(&model, &f).unwrap();
        let part = encode(&model, &prefix).unwrap();
        let complete = cut / 2;
        prop_assert_eq!(&part[..complete], &full[..complete]);
    }
}
