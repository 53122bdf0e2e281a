//! Word (token) error rate by unit-cost Levenshtein alignment.

use serde::Serialize;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct WerStats {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_len: usize,
    /// Set when the reference is empty but the hypothesis is not; the error
    /// rate then counts insertions against a denominator of 1.
    pub empty_ref: bool,
}

impl WerStats {
    pub fn edits(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    /// Percentage `100·(S+I+D)/N`.
    pub fn wer(&self) -> f64 {
        100.0 * self.edits() as f64 / self.ref_len.max(1) as f64
    }

    /// Sums counts; the result's rate is the corpus-level rate.
    pub fn add(&mut self, o: &WerStats) {
        self.substitutions += o.substitutions;
        self.insertions += o.insertions;
        self.deletions += o.deletions;
        self.ref_len += o.ref_len;
        self.empty_ref |= o.empty_ref;
    }
}

/// Minimum-edit alignment of `hyp` against `reference`. Among alignments with
/// the fewest edits the one with the fewest insertions plus deletions is
/// chosen, which fixes the S/I/D split and makes the result symmetric: swapping
/// the arguments swaps insertions and deletions.
pub fn wer<T: PartialEq>(reference: &[T], hyp: &[T]) -> WerStats {
    let (n, m) = (reference.len(), hyp.len());
    // cost = (edits, indels), compared lexicographically
    let mut cost = vec![(0usize, 0usize); (n + 1) * (m + 1)];
    let idx = |i: usize, j: usize| i * (m + 1) + j;
    for i in 0..=n {
        for j in 0..=m {
            if i == 0 && j == 0 {
                continue;
            }
            let mut best = (usize::MAX, usize::MAX);
            if i > 0 && j > 0 {
                let (e, d) = cost[idx(i - 1, j - 1)];
                best = best.min((e + usize::from(reference[i - 1] != hyp[j - 1]), d));
            }
            if i > 0 {
                let (e, d) = cost[idx(i - 1, j)];
                best = best.min((e + 1, d + 1));
            }
            if j > 0 {
                let (e, d) = cost[idx(i, j - 1)];
                best = best.min((e + 1, d + 1));
            }
            cost[idx(i, j)] = best;
        }
    }
    let (edits, indels) = cost[idx(n, m)];
    // insertions − deletions = m − n
    let insertions = ((indels as i64 + m as i64 - n as i64) / 2) as usize;
    let deletions = indels - insertions;
    WerStats { substitutions: edits - indels, insertions, deletions, ref_len: n, empty_ref: n == 0 && m > 0 }
}

/// Space-separated token strings.
pub fn wer_str(reference: &str, hyp: &str) -> WerStats {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hyp.split_whitespace().collect();
    wer(&r, &h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert_eq!(wer_str("a b c", "a b c").wer(), 0.0);
        let s = wer_str("a b c", "a c");
        assert_eq!((s.substitutions, s.insertions, s.deletions), (0, 0, 1));
        assert!((s.wer() - 100.0 / 3.0).abs() < 1e-9);
        let s = wer_str("a b c", "a x c d");
        assert_eq!((s.substitutions, s.insertions, s.deletions), (1, 1, 0));
        let s = wer_str("", "a b");
        assert!(s.empty_ref);
        assert_eq!(s.insertions, 2);
        assert_eq!(s.wer(), 200.0);
        assert_eq!(wer_str("", "").wer(), 0.0);
        let s = wer_str("a b", "");
        assert_eq!(s.deletions, 2);
        assert_eq!(s.wer(), 100.0);
    }

    #[test]
    fn corpus_aggregation() {
        let mut total = WerStats::default();
        total.add(&wer_str("a b c d", "a b c d"));
        total.add(&wer_str("a b c d", "a b c"));
        assert_eq!(total.wer(), 12.5);
    }
}
