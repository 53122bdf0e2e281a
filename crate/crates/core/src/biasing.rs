//! Contextual biasing. Word-level phrases are spelled into subword units and
//! compiled into a deterministic trie-shaped automaton whose arcs each carry a
//! fixed boost. Leaving a partially matched phrase takes a failure arc back to
//! the start state that takes the boost back, so only completed phrases keep
//! their bonus.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::sync::Arc;

use crate::decoder::FusionHook;
use crate::error::{Error, Result};

/// Word to subword-unit spelling.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SubwordInventory {
    words: HashMap<String, Vec<u32>>,
}

impl SubwordInventory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, word: impl Into<String>, units: Vec<u32>) {
        self.words.insert(word.into(), units);
    }

    pub fn spell_word(&self, word: &str) -> Option<&[u32]> {
        self.words.get(word).map(Vec::as_slice)
    }

    /// Concatenated spelling of a whitespace-separated phrase, or the first
    /// word that cannot be spelled.
    pub fn spell(&self, phrase: &str) -> std::result::Result<Vec<u32>, String> {
        let mut out = Vec::new();
        for word in phrase.split_whitespace() {
            match self.words.get(word) {
                Some(units) => out.extend_from_slice(units),
                None => return Err(word.to_string()),
            }
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Parses `word<TAB>unit unit ...` lines; `unit_id` resolves unit names.
    pub fn parse(text: &str, unit_id: impl Fn(&str) -> Option<u32>) -> Result<Self> {
        let mut inv = SubwordInventory::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (word, units) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("inventory line {}: expected word<TAB>units", n + 1)))?;
            let ids = units
                .split_whitespace()
                .map(|u| unit_id(u).ok_or_else(|| Error::Format(format!("inventory line {}: unknown unit `{u}`", n + 1))))
                .collect::<Result<Vec<_>>>()?;
            if ids.is_empty() {
                return Err(Error::Format(format!("inventory line {}: word `{word}` has no units", n + 1)));
            }
            inv.insert(word.trim(), ids);
        }
        Ok(inv)
    }
}

/// One phrase per non-empty line.
pub fn parse_phrases(text: &str) -> Vec<String> {
    text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect()
}

#[derive(Clone, Debug, PartialEq)]
struct State {
    arcs: BTreeMap<u32, u32>,
    /// Boost collected from start to here.
    depth_boost: f64,
    /// Weight of the failure arc back to start (≤ 0).
    failure: f64,
    is_final: bool,
}

/// Subword-level context automaton.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextFst {
    boost: f64,
    states: Vec<State>,
    skipped: Vec<String>,
}

pub const START: u32 = 0;

impl ContextFst {
    /// An automaton that never matches: every transition is `(start, 0)`.
    pub fn empty(per_unit_boost: f64) -> Self {
        ContextFst { boost: per_unit_boost, states: vec![new_state(0.0)], skipped: Vec::new() }
    }

    pub fn per_unit_boost(&self) -> f64 {
        self.boost
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn num_arcs(&self) -> usize {
        self.states.iter().map(|s| s.arcs.len()).sum()
    }

    /// Phrases dropped because a word could not be spelled.
    pub fn skipped(&self) -> &[String] {
        &self.skipped
    }

    pub fn arc(&self, state: u32, label: u32) -> Option<u32> {
        self.states.get(state as usize)?.arcs.get(&label).copied()
    }

    pub fn arcs(&self, state: u32) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.states[state as usize].arcs.iter().map(|(&l, &d)| (l, d))
    }

    pub fn is_final(&self, state: u32) -> bool {
        self.states.get(state as usize).is_some_and(|s| s.is_final)
    }

    pub fn failure_weight(&self, state: u32) -> Result<f64> {
        self.states.get(state as usize).map(|s| s.failure).ok_or(Error::UnknownState(state))
    }

    pub fn depth_boost(&self, state: u32) -> Result<f64> {
        self.states.get(state as usize).map(|s| s.depth_boost).ok_or(Error::UnknownState(state))
    }

    /// Textual dump: `src label weight dst` per arc, `src <fail> weight 0` per
    /// failure arc that removes boost, `final state` per phrase end.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (src, s) in self.states.iter().enumerate() {
            for (label, dst) in &s.arcs {
                writeln!(out, "{src} {label} {} {dst}", self.boost).unwrap();
            }
        }
        for (src, s) in self.states.iter().enumerate() {
            if src != START as usize && !s.is_final {
                writeln!(out, "{src} <fail> {} {START}", s.failure).unwrap();
            }
        }
        for (src, s) in self.states.iter().enumerate() {
            if s.is_final {
                writeln!(out, "final {src}").unwrap();
            }
        }
        out
    }
}

fn new_state(depth_boost: f64) -> State {
    State { arcs: BTreeMap::new(), depth_boost, failure: 0.0, is_final: false }
}

/// Builds the context automaton for `phrases`. Phrases with unspellable
/// words are skipped (see [`ContextFst::skipped`]); it is an error when
/// phrases were given but none could be spelled.
pub fn compile_context(phrases: &[String], inventory: &SubwordInventory, per_unit_boost: f64) -> Result<ContextFst> {
    if !(per_unit_boost > 0.0 && per_unit_boost.is_finite()) {
        return Err(Error::config("per-unit boost must be positive"));
    }
    let mut fst = ContextFst::empty(per_unit_boost);
    let mut spelled = 0;
    for phrase in phrases {
        let units = match inventory.spell(phrase) {
            Ok(u) if !u.is_empty() => u,
            _ => {
                fst.skipped.push(phrase.clone());
                continue;
            }
        };
        spelled += 1;
        let mut at = START as usize;
        for &u in &units {
            at = match fst.states[at].arcs.get(&u) {
                Some(&next) => next as usize,
                None => {
                    let next = fst.states.len();
                    let depth = fst.states[at].depth_boost + per_unit_boost;
                    fst.states.push(new_state(depth));
                    fst.states[at].arcs.insert(u, next as u32);
                    next
                }
            };
        }
        fst.states[at].is_final = true;
    }
    if spelled == 0 && !phrases.is_empty() {
        return Err(Error::AllOov(fst.skipped));
    }
    // failure weight: boost gathered since the nearest phrase-final ancestor
    let mut stack = vec![(START as usize, 0.0f64)];
    while let Some((s, pending)) = stack.pop() {
        fst.states[s].failure = -pending;
        let children: Vec<usize> = fst.states[s].arcs.values().map(|&d| d as usize).collect();
        for d in children {
            let carried = if fst.states[d].is_final { 0.0 } else { pending + per_unit_boost };
            stack.push((d, carried));
        }
    }
    Ok(fst)
}

/// Advances the automaton by one label, returning the successor and the score
/// increment.
pub fn bias_transition(fst: &ContextFst, state: u32, label: u32) -> Result<(u32, f64)> {
    let s = fst.states.get(state as usize).ok_or(Error::UnknownState(state))?;
    if let Some(&next) = s.arcs.get(&label) {
        return Ok((next, fst.boost));
    }
    if state == START {
        return Ok((START, 0.0));
    }
    let removed = s.failure;
    match fst.states[START as usize].arcs.get(&label) {
        Some(&next) => Ok((next, removed + fst.boost)),
        None => Ok((START, removed)),
    }
}

/// `base + λ · delta`
pub fn fused_score(base_logprob: f64, delta: f64, lambda: f64) -> f64 {
    base_logprob + lambda * delta
}

/// Shallow-fusion hook scoring hypotheses with a context automaton.
#[derive(Clone, Debug)]
pub struct ShallowFusion {
    fst: Arc<ContextFst>,
    lambda: f64,
}

impl ShallowFusion {
    pub fn new(fst: Arc<ContextFst>, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::config("fusion weight must be non-negative"));
        }
        Ok(ShallowFusion { fst, lambda })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn fst(&self) -> &ContextFst {
        &self.fst
    }
}

impl FusionHook for ShallowFusion {
    fn start(&self) -> u32 {
        START
    }

    fn transition(&self, state: u32, label: u32) -> (u32, f64) {
        let (next, delta) = bias_transition(&self.fst, state, label).expect("hypotheses only carry valid states");
        (next, fused_score(0.0, delta, self.lambda))
    }

    /// A hypothesis that ends mid-phrase gives its pending boost back.
    fn finalize(&self, state: u32) -> f64 {
        self.lambda * self.fst.failure_weight(state).unwrap_or(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const W: f64 = 0.75;

    /// Units c=1, a=2, t=3, r=4, b=5, x=9.
    fn inventory() -> SubwordInventory {
        let mut inv = SubwordInventory::new();
        inv.insert("cat", vec![1, 2, 3]);
        inv.insert("car", vec![1, 2, 4]);
        inv.insert("ab", vec![2, 5]);
        inv.insert("bc", vec![5, 1]);
        inv
    }

    fn compile(phrases: &[&str]) -> ContextFst {
        let p: Vec<String> = phrases.iter().map(|s| s.to_string()).collect();
        compile_context(&p, &inventory(), W).unwrap()
    }

    fn run(fst: &ContextFst, labels: &[u32]) -> (u32, Vec<f64>) {
        let mut s = START;
        let mut deltas = Vec::new();
        for &l in labels {
            let (n, d) = bias_transition(fst, s, l).unwrap();
            s = n;
            deltas.push(d);
        }
        (s, deltas)
    }

    #[test]
    fn single_phrase_structure() {
        let fst = compile(&["cat"]);
        assert_eq!(fst.num_states(), 4);
        assert_eq!(fst.arc(0, 1), Some(1));
        assert_eq!(fst.arc(1, 2), Some(2));
        assert_eq!(fst.arc(2, 3), Some(3));
        assert_eq!(fst.failure_weight(1).unwrap(), -W);
        assert_eq!(fst.failure_weight(2).unwrap(), -2.0 * W);
        assert!(fst.is_final(3));
        assert_eq!(fst.dump(), "0 1 0.75 1\n1 2 0.75 2\n2 3 0.75 3\n1 <fail> -0.75 0\n2 <fail> -1.5 0\nfinal 3\n");
    }

    #[test]
    fn shared_prefix_has_two_leaves() {
        let fst = compile(&["cat", "car"]);
        assert_eq!(fst.num_states(), 5);
        let ca = fst.arc(fst.arc(0, 1).unwrap(), 2).unwrap();
        assert_eq!(fst.arcs(ca).count(), 2);
        assert_eq!((1..5).filter(|&s| fst.is_final(s)).count(), 2);
    }

    #[test]
    fn full_match_and_divergence() {
        let fst = compile(&["cat"]);
        let (end, d) = run(&fst, &[1, 2, 3]);
        assert!(fst.is_final(end));
        assert_eq!(d.iter().sum::<f64>(), 3.0 * W);
        let (end, d) = run(&fst, &[1, 2, 9]);
        assert_eq!(end, START);
        assert_eq!(d, vec![W, W, -2.0 * W]);
        assert_eq!(d.iter().sum::<f64>(), 0.0);
    }

    #[test]
    fn retry_from_start_after_failure() {
        let fst = compile(&["cat", "ab"]);
        let (end, d) = run(&fst, &[1, 5]);
        assert_eq!(end, START);
        assert_eq!(d, vec![W, -W]);
        // c, x, a: failure, then "a" restarts "ab"
        let (end, d) = run(&fst, &[1, 9, 2]);
        assert_eq!(d, vec![W, -W, W]);
        assert_eq!(end, fst.arc(0, 2).unwrap());
    }

    #[test]
    fn overlapping_phrases_follow_greedy_matcher() {
        let fst = compile(&["ab", "bc"]);
        let (_, d) = run(&fst, &[2, 5, 1]);
        assert_eq!(d.iter().sum::<f64>(), oracle(&[vec![2, 5], vec![5, 1]], &[2, 5, 1], W));
        assert_eq!(d.iter().sum::<f64>(), 2.0 * W);
    }

    #[test]
    fn unknown_state_and_all_oov() {
        let fst = compile(&["cat"]);
        assert!(matches!(bias_transition(&fst, 99, 1), Err(Error::UnknownState(99))));
        let err = compile_context(&["dog".to_string()], &inventory(), W).unwrap_err();
        assert!(matches!(err, Error::AllOov(v) if v == vec!["dog".to_string()]));
        let fst = compile_context(&["dog".into(), "cat".into()], &inventory(), W).unwrap();
        assert_eq!(fst.skipped(), ["dog".to_string()]);
    }

    #[test]
    fn empty_phrase_list_never_scores() {
        let fst = compile_context(&[], &inventory(), W).unwrap();
        for l in 0..10 {
            assert_eq!(bias_transition(&fst, START, l).unwrap(), (START, 0.0));
        }
    }

    #[test]
    fn fused_score_threshold_flips_argmax() {
        // hypothesis A: base -1.0, no boost; hypothesis B: base -2.5, boost 3w
        let (a, b, boost) = (-1.0, -2.5, 3.0 * W);
        let threshold = (a - b) / boost;
        assert!(fused_score(b, boost, threshold * 0.99) < a);
        assert!(fused_score(b, boost, threshold * 1.01) > a);
        assert_eq!(fused_score(b, boost, 0.0), b);
    }

    #[test]
    fn failure_weights_match_path_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut inv = SubwordInventory::new();
        let mut phrases = Vec::new();
        for i in 0..50 {
            let len = rng.random_range(1..6);
            let word = format!("w{i}");
            inv.insert(word.clone(), (0..len).map(|_| rng.random_range(1..5)).collect());
            phrases.push(word);
        }
        let fst = compile_context(&phrases, &inv, W).unwrap();
        // phrases may be prefixes of each other, so the failure arc only
        // covers the boost since the nearest final ancestor
        let mut stack = vec![(START, 0.0, 0.0)];
        let mut visited = 0;
        while let Some((s, path, since_final)) = stack.pop() {
            visited += 1;
            assert_eq!(fst.depth_boost(s).unwrap(), path);
            assert_eq!(fst.failure_weight(s).unwrap(), if fst.is_final(s) { 0.0 } else { -since_final });
            for (_, d) in fst.arcs(s) {
                let p = path + W;
                stack.push((d, p, if fst.is_final(d) { 0.0 } else { since_final + W }));
            }
        }
        assert_eq!(visited, fst.num_states());
    }

    #[test]
    fn divergent_sequences_net_to_exactly_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let phrases = vec![vec![1, 2, 3], vec![1, 2, 4], vec![2, 5], vec![5, 1], vec![3, 3, 3, 3]];
        let mut inv = SubwordInventory::new();
        let names: Vec<String> = (0..phrases.len()).map(|i| format!("p{i}")).collect();
        for (n, p) in names.iter().zip(&phrases) {
            inv.insert(n.clone(), p.clone());
        }
        let fst = compile_context(&names, &inv, 0.3).unwrap();
        for _ in 0..1000 {
            let p = &phrases[rng.random_range(0..phrases.len())];
            let mut seq = p[..rng.random_range(1..p.len())].to_vec();
            // a symbol that neither continues the match nor starts a phrase
            seq.push(9);
            let (end, d) = run(&fst, &seq);
            assert_eq!(end, START);
            let mut total = 0.0;
            for v in d {
                total += v;
            }
            assert_eq!(total, 0.0, "{seq:?}");
        }
    }

    #[test]
    fn matches_brute_force_matcher_on_random_sequences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            let n = rng.random_range(1..5);
            let mut inv = SubwordInventory::new();
            let mut names = Vec::new();
            let mut spellings = Vec::new();
            for i in 0..n {
                let len = rng.random_range(1..4);
                let s: Vec<u32> = (0..len).map(|_| rng.random_range(1..4)).collect();
                inv.insert(format!("p{i}"), s.clone());
                names.push(format!("p{i}"));
                spellings.push(s);
            }
            let fst = compile_context(&names, &inv, W).unwrap();
            let seq: Vec<u32> = (0..rng.random_range(0..12)).map(|_| rng.random_range(1..5)).collect();
            let (end, d) = run(&fst, &seq);
            let total = d.iter().sum::<f64>() + fst.failure_weight(end).unwrap();
            assert!((total - oracle(&spellings, &seq, W)).abs() < 1e-9, "{spellings:?} {seq:?}");
        }
    }

    /// Left-to-right matcher over plain phrase spellings: extend the current
    /// match while it stays a prefix of some phrase, bank the boost whenever
    /// it spells a whole phrase, and otherwise drop unbanked boost and retry
    /// the symbol once from scratch. Unbanked boost is dropped at the end.
    fn oracle(phrases: &[Vec<u32>], seq: &[u32], w: f64) -> f64 {
        let is_prefix = |m: &[u32]| phrases.iter().any(|p| p.starts_with(m));
        let is_phrase = |m: &[u32]| phrases.iter().any(|p| p == m);
        let mut current: Vec<u32> = Vec::new();
        let (mut banked, mut pending) = (0.0, 0.0);
        for &l in seq {
            let mut ext = current.clone();
            ext.push(l);
            if is_prefix(&ext) {
                current = ext;
            } else {
                pending = 0.0;
                current = if is_prefix(&[l]) { vec![l] } else { Vec::new() };
                if current.is_empty() {
                    continue;
                }
            }
            pending += w;
            if is_phrase(&current) {
                banked += pending;
                pending = 0.0;
            }
        }
        banked
    }
}
