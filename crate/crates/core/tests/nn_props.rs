use proptest::prelude::*;

use rnnt::nn::{layer_norm, stack_frames, FeatureSequence, GateShift, LstmLayer, LstmState, Tensor2D};

fn vec_f64(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, n)
}

proptest! {
    #[test]
    fn layer_norm_standardizes(x in vec_f64(2..40)) {
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.len() as f64;
        prop_assume!(var > 1e-3);
        let ones = vec![1.0; x.len()];
        let zeros = vec![0.0; x.len()];
        let y = layer_norm(&x, &ones, &zeros, 1e-12).unwrap();
        let m = y.iter().sum::<f64>() / y.len() as f64;
        let v = y.iter().map(|a| (a - m).powi(2)).sum::<f64>() / y.len() as f64;
        prop_assert!(m.abs() < 1e-5);
        prop_assert!((v - 1.0).abs() < 1e-5);
        prop_assert_eq!(y, layer_norm(&x, &ones, &zeros, 1e-12).unwrap());
    }

    #[test]
    fn lstm_cell_stays_bounded(
        units in 1usize..6,
        inp in 1usize..5,
        seed in any::<u64>(),
        norm in any::<bool>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut w = |r: usize, c: usize| Tensor2D::from_fn(r, c, |_, _| rng.random_range(-3.0f64..3.0));
        let input = w(4 * units, inp);
        let recurrent = w(4 * units, units);
        let shift = if norm {
            GateShift::Norm { gain: vec![1.5; 4 * units], bias: vec![0.5; 4 * units] }
        } else {
            GateShift::Bias(vec![0.25; 4 * units])
        };
        let layer = LstmLayer::new(input, recurrent, shift, None).unwrap();
        let mut state: LstmState<f64> = layer.zero_state();
        for _ in 0..20 {
            let x: Vec<f64> = (0..inp).map(|_| rng.random_range(-5.0..5.0)).collect();
            let next = layer.step(&x, &state).unwrap();
            for (c1, c0) in next.cell.iter().zip(&state.cell) {
                prop_assert!(c1.abs() <= c0.abs() + 1.0);
            }
            prop_assert_eq!(&next.cell, &layer.step(&x, &state).unwrap().cell);
            state = next;
        }
    }

    #[test]
    fn stack_frames_length_is_ceiling(frames in 1usize..60, dim in 1usize..4, left in 0usize..4, down in 1usize..5) {
        let f = FeatureSequence::new(Tensor2D::from_fn(frames, dim, |t, c| (t * dim + c) as f32), 0.01);
        let s = stack_frames(&f, left, down).unwrap();
        prop_assert_eq!(s.len(), frames.div_ceil(down));
        prop_assert_eq!(s.dim(), dim * (left + 1));
    }
}
