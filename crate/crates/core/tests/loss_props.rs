use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rnnt::loss::brute::{ctc_loss_bruteforce, rnnt_loss_bruteforce};
use rnnt::loss::{ctc_loss, rnnt_loss, LabelSequence, Lattice};
use rnnt::nn::{logaddexp, Tensor2D};

fn instance(frames: usize, targets: usize, classes: usize, seed: u64) -> (Lattice, LabelSequence) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = (0..frames * (targets + 1) * classes).map(|_| rng.random_range(-4.0..4.0)).collect();
    let labels = (0..targets).map(|_| rng.random_range(1..classes as u32)).collect();
    (Lattice::new(frames, targets, classes, logits).unwrap(), LabelSequence::new(labels).unwrap())
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

proptest! {
    #[test]
    fn rnnt_matches_bruteforce(frames in 1usize..7, targets in 0usize..5, classes in 2usize..6, seed in any::<u64>()) {
        prop_assume!(frames + targets <= 10);
        let (lat, y) = instance(frames, targets, classes, seed);
        let fast = rnnt_loss(&lat, &y).unwrap().loss;
        let slow = rnnt_loss_bruteforce(&lat, &y).unwrap();
        prop_assert!(rel(fast, slow) < 1e-9, "{} vs {}", fast, slow);
    }

    #[test]
    fn marginal_identity_and_gradient_rows(frames in 1usize..6, targets in 0usize..4, classes in 2usize..5, seed in any::<u64>()) {
        let (lat, y) = instance(frames, targets, classes, seed);
        let out = rnnt_loss(&lat, &y).unwrap();
        let p = &out.posteriors;
        let lp = |t: usize, u: usize, k: usize| p.log_probs[lat.index(t, u) + k];
        let total = -out.loss;
        prop_assert!((p.alpha(frames - 1, targets) + lp(frames - 1, targets, 0) - total).abs() < 1e-8);
        prop_assert!((p.beta(0, 0) - total).abs() < 1e-8);
        for t in 0..frames {
            for u in 0..=targets {
                let mut outgoing = f64::NEG_INFINITY;
                if t + 1 < frames {
                    outgoing = logaddexp(outgoing, p.alpha(t, u) + lp(t, u, 0) + p.beta(t + 1, u));
                } else if u == targets {
                    outgoing = logaddexp(outgoing, p.alpha(t, u) + lp(t, u, 0));
                }
                if u < targets {
                    let k = y.as_slice()[u] as usize;
                    outgoing = logaddexp(outgoing, p.alpha(t, u) + lp(t, u, k) + p.beta(t, u + 1));
                }
                let here = p.alpha(t, u) + p.beta(t, u);
                if here.is_finite() {
                    prop_assert!((outgoing - here).abs() < 1e-8, "({}, {}) {} vs {}", t, u, outgoing, here);
                }
                let g: f64 = p.grad[lat.index(t, u)..lat.index(t, u) + classes].iter().sum();
                prop_assert!(g.abs() < 1e-8);
            }
        }
    }

    #[test]
    fn shift_invariance(frames in 1usize..6, targets in 0usize..4, classes in 2usize..5, seed in any::<u64>(), c in -50.0f64..50.0) {
        let (lat, y) = instance(frames, targets, classes, seed);
        let base = rnnt_loss(&lat, &y).unwrap().loss;
        let mut shifted = lat.clone();
        let t = seed as usize % frames;
        let u = (seed >> 8) as usize % (targets + 1);
        shifted.cell_mut(t, u).iter_mut().for_each(|v| *v += c);
        let moved = rnnt_loss(&shifted, &y).unwrap().loss;
        prop_assert!((base - moved).abs() <= 1e-9 * base.abs().max(1.0));
    }

    #[test]
    fn ctc_matches_bruteforce(frames in 1usize..6, targets in 0usize..4, classes in 2usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = Tensor2D::from_fn(frames, classes, |_, _| rng.random_range(-4.0..4.0));
        let y: Vec<u32> = (0..targets).map(|_| rng.random_range(1..classes as u32)).collect();
        let repeats = y.windows(2).filter(|w| w[0] == w[1]).count();
        prop_assume!(frames >= y.len() + repeats);
        let y = LabelSequence::new(y).unwrap();
        let fast = ctc_loss(&logits, &y).unwrap().loss;
        let slow = ctc_loss_bruteforce(&logits, &y).unwrap();
        prop_assert!(rel(fast, slow) < 1e-9, "{} vs {}", fast, slow);
    }
}
