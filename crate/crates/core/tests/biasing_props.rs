mod common;

use std::sync::Arc;

use proptest::prelude::*;

use rnnt::biasing::{bias_transition, compile_context, ContextFst, ShallowFusion, SubwordInventory, START};
use rnnt::decoder::{decode_utterance, DecodeParams, NoFusion};

use common::{micro_model, random_features};

const ALPHABET: u32 = 6;

fn phrase_set() -> impl Strategy<Value = Vec<Vec<u32>>> {
    prop::collection::vec(prop::collection::vec(1..=ALPHABET, 1..6), 1..6)
}

fn compile(phrases: &[Vec<u32>], boost: f64) -> ContextFst {
    let mut inv = SubwordInventory::new();
    let names: Vec<String> = (0..phrases.len()).map(|i| format!("p{i}")).collect();
    for (n, p) in names.iter().zip(phrases) {
        inv.insert(n.clone(), p.clone());
    }
    compile_context(&names, &inv, boost).unwrap()
}

/// Sequential sum of the deltas and the end state.
fn run(fst: &ContextFst, labels: &[u32]) -> (u32, f64) {
    let mut s = START;
    let mut total = 0.0;
    for &l in labels {
        let (n, d) = bias_transition(fst, s, l).unwrap();
        s = n;
        total += d;
    }
    (s, total)
}

/// A label that leaves `state` without starting a new match.
fn escape(fst: &ContextFst, state: u32) -> Option<u32> {
    (1..=ALPHABET + 1).find(|&l| fst.arc(state, l).is_none() && fst.arc(START, l).is_none())
}

proptest! {
    #[test]
    fn divergence_nets_to_exactly_zero(phrases in phrase_set(), pick in any::<prop::sample::Index>(), cut in any::<prop::sample::Index>(), boost in 0.01f64..5.0) {
        let fst = compile(&phrases, boost);
        let p = pick.get(&phrases);
        prop_assume!(p.len() > 1);
        let prefix = &p[..1 + cut.index(p.len() - 1)];
        // a completed shorter phrase along the way legitimately keeps its boost
        let mut s = START;
        for &l in prefix {
            s = fst.arc(s, l).unwrap();
            prop_assume!(!fst.is_final(s));
        }
        let x = escape(&fst, s).unwrap();
        let mut seq = prefix.to_vec();
        seq.push(x);
        let (end, total) = run(&fst, &seq);
        prop_assert_eq!(end, START);
        prop_assert_eq!(total, 0.0);
    }

    #[test]
    fn completed_phrase_earns_boost_times_length(phrases in phrase_set(), pick in any::<prop::sample::Index>(), boost in 0.01f64..5.0) {
        let fst = compile(&phrases, boost);
        let p = pick.get(&phrases);
        let x = escape(&fst, START).unwrap();
        let mut seq = vec![x];
        seq.extend_from_slice(p);
        let (s, _) = run(&fst, &seq);
        let Some(y) = escape(&fst, s) else { return Ok(()) };
        seq.push(y);
        let (end, total) = run(&fst, &seq);
        prop_assert_eq!(end, START);
        let want = boost * p.len() as f64;
        prop_assert!((total - want).abs() <= 1e-12 * want, "{} vs {}", total, want);
    }

    #[test]
    fn transitions_are_pure(phrases in phrase_set(), seq in prop::collection::vec(1..=ALPHABET, 0..30)) {
        let fst = compile(&phrases, 0.7);
        prop_assert_eq!(run(&fst, &seq), run(&fst, &seq));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn empty_list_and_zero_weight_match_unbiased_decoding(frames in 1usize..20, seed in any::<u64>(), phrases in phrase_set()) {
        let model = micro_model(ALPHABET as usize, seed);
        let f = random_features(frames, 3, seed ^ 7);
        let p = DecodeParams::default();
        let plain = decode_utterance(&model, &f, &p, &NoFusion).unwrap();
        let empty = compile_context(&[], &SubwordInventory::new(), 1.0).unwrap();
        let fused = ShallowFusion::new(Arc::new(empty), 2.0).unwrap();
        prop_assert_eq!(&decode_utterance(&model, &f, &p, &fused).unwrap(), &plain);
        let zero = ShallowFusion::new(Arc::new(compile(&phrases, 1.0)), 0.0).unwrap();
        prop_assert_eq!(&decode_utterance(&model, &f, &p, &zero).unwrap(), &plain);
    }
}
