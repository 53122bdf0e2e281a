use proptest::prelude::*;

use rnnt::nn::Tensor2D;
use rnnt::quant::{qmatvec_i32, qmatvec_i32_portable, quantize_asymmetric, quantize_symmetric, quantize_vector};

fn matrix() -> impl Strategy<Value = Tensor2D<f32>> {
    (1usize..9, 1usize..70, 0.01f32..100.0).prop_flat_map(|(r, c, scale)| {
        prop::collection::vec(-1.0f32..1.0, r * c)
            .prop_map(move |v| Tensor2D::from_vec(r, c, v.into_iter().map(|x| x * scale).collect()).unwrap())
    })
}

proptest! {
    #[test]
    fn symmetric_round_trip_bound_and_oddness(x in matrix()) {
        let q = quantize_symmetric(&x).unwrap();
        let theta = q.theta();
        let neg = quantize_symmetric(&x.map(|v: f32| -v)).unwrap();
        for (i, (&v, &qi)) in x.data().iter().zip(q.values()).enumerate() {
            prop_assert!(qi != i8::MIN);
            let err = (v as f64 - qi as f64 / theta).abs();
            prop_assert!(err <= 0.5 / theta * (1.0 + 1e-12), "{} -> {} err {}", v, qi, err);
            prop_assert_eq!(neg.values()[i], -qi);
        }
    }

    #[test]
    fn asymmetric_round_trip_bound(x in matrix(), offset in -50.0f32..50.0) {
        let x = x.map(|v: f32| v + offset);
        let q = quantize_asymmetric(&x).unwrap();
        let (s, zp) = (q.scale(), q.zero_point() as f64);
        for (&v, &qi) in x.data().iter().zip(q.values()) {
            let err = (v as f64 - (qi as f64 - zp) / s).abs();
            prop_assert!(err <= 0.5 / s * (1.0 + 1e-12), "{} -> {} err {}", v, qi, err);
        }
    }

    #[test]
    fn qmatvec_is_exact_and_order_free(w in matrix(), seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f32> = (0..w.cols()).map(|_| rng.random_range(-3.0..3.0)).collect();
        let q = quantize_symmetric(&w).unwrap();
        let (v, _) = quantize_vector(&x).unwrap();
        let fast = qmatvec_i32(&q, &v).unwrap();
        prop_assert_eq!(&fast, &qmatvec_i32_portable(&q, &v).unwrap());
        let cols = w.cols();
        for (r, &got) in fast.iter().enumerate() {
            let row = &q.values()[r * cols..(r + 1) * cols];
            let forward: i64 = row.iter().zip(&v).map(|(&a, &b)| a as i64 * b as i64).sum();
            let backward: i64 = row.iter().zip(&v).rev().map(|(&a, &b)| a as i64 * b as i64).sum();
            prop_assert_eq!(got as i64, forward);
            prop_assert_eq!(forward, backward);
            for (a, b) in row.chunks(2).zip(v.chunks(2)) {
                let pair: i32 = a.iter().zip(b).map(|(&p, &q)| p as i32 * q as i32).sum();
                prop_assert!(pair.abs() <= 2 * 127 * 127 && pair.abs() < 1 << 15);
            }
        }
    }
}
