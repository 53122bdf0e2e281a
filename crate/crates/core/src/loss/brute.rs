//! Exhaustive alignment enumeration. Exponential; test oracles only.

use super::{LabelSequence, Lattice, BLANK};
use crate::error::{Error, Result};
use crate::nn::{log_softmax, logaddexp, Tensor2D};

/// Largest `frames + labels` the transducer enumerator accepts.
pub const RNNT_ORACLE_LIMIT: usize = 20;
/// Largest number of frame labelings the CTC enumerator accepts.
pub const CTC_ORACLE_LIMIT: usize = 1 << 20;

/// `−log P(y|x)` by summing every alignment of `frames` blanks and the labels
/// that ends with a blank emitted from the last cell.
pub fn rnnt_loss_bruteforce(lattice: &Lattice, labels: &LabelSequence) -> Result<f64> {
    let (log_likelihood, _) = rnnt_enumerate(lattice, labels)?;
    Ok(-log_likelihood)
}

/// Number of alignments [`rnnt_loss_bruteforce`] sums over.
pub fn rnnt_path_count(lattice: &Lattice, labels: &LabelSequence) -> Result<usize> {
    Ok(rnnt_enumerate(lattice, labels)?.1)
}

fn rnnt_enumerate(lattice: &Lattice, labels: &LabelSequence) -> Result<(f64, usize)> {
    let frames = lattice.frames();
    let u_max = labels.len();
    if frames + u_max > RNNT_ORACLE_LIMIT {
        return Err(Error::OracleScale(format!("{frames} frames + {u_max} labels > {RNNT_ORACLE_LIMIT}")));
    }
    if lattice.targets() != u_max {
        return Err(Error::config("lattice and label sequence disagree on length"));
    }
    labels.check_classes(lattice.classes())?;
    if frames == 0 {
        return Err(Error::Infeasible { frames, labels: u_max });
    }
    let cells: Vec<Vec<f64>> = (0..frames)
        .flat_map(|t| (0..=u_max).map(move |u| (t, u)))
        .map(|(t, u)| log_softmax(lattice.cell(t, u)))
        .collect();
    let walk = Walk { cells: &cells, y: labels.as_slice(), frames, width: u_max + 1 };
    let mut paths = Vec::new();
    walk.visit(0, 0, 0.0, &mut paths);
    let total = paths.iter().fold(f64::NEG_INFINITY, |acc, &p| logaddexp(acc, p));
    Ok((total, paths.len()))
}

struct Walk<'a> {
    cells: &'a [Vec<f64>],
    y: &'a [u32],
    frames: usize,
    width: usize,
}

impl Walk<'_> {
    fn visit(&self, t: usize, u: usize, score: f64, paths: &mut Vec<f64>) {
        let cell = &self.cells[t * self.width + u];
        let blank = score + cell[BLANK as usize];
        if t + 1 < self.frames {
            self.visit(t + 1, u, blank, paths);
        } else if u + 1 == self.width {
            paths.push(blank);
        }
        if u + 1 < self.width {
            self.visit(t, u + 1, score + cell[self.y[u] as usize], paths);
        }
    }
}

/// Removes repeats, then blanks.
pub fn ctc_collapse(labeling: &[u32]) -> Vec<u32> {
    let mut out = Vec::new();
    let mut prev = None;
    for &s in labeling {
        if Some(s) != prev && s != BLANK {
            out.push(s);
        }
        prev = Some(s);
    }
    out
}

/// `−log P(y|x)` by summing over every frame labeling that collapses to `y`.
/// Returns `+inf` when none does.
pub fn ctc_loss_bruteforce(frame_logits: &Tensor2D<f64>, labels: &LabelSequence) -> Result<f64> {
    let frames = frame_logits.rows();
    let classes = frame_logits.cols();
    labels.check_classes(classes)?;
    let count = (classes as f64).powi(frames as i32);
    if count > CTC_ORACLE_LIMIT as f64 {
        return Err(Error::OracleScale(format!("{classes}^{frames} labelings")));
    }
    let lp: Vec<Vec<f64>> = (0..frames).map(|t| log_softmax(frame_logits.row(t))).collect();
    let mut labeling = vec![0u32; frames];
    let mut total = f64::NEG_INFINITY;
    for mut code in 0..count as usize {
        for s in labeling.iter_mut() {
            *s = (code % classes) as u32;
            code /= classes;
        }
        if ctc_collapse(&labeling) == labels.as_slice() {
            let score: f64 = labeling.iter().enumerate().map(|(t, &s)| lp[t][s as usize]).sum();
            total = logaddexp(total, score);
        }
    }
    Ok(-total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(frames: usize, targets: usize) -> Lattice {
        Lattice::from_fn(frames, targets, 3, |t, u, k| (t + 2 * u + k) as f64 * 0.1).unwrap()
    }

    #[test]
    fn single_frame_no_labels_is_one_blank() {
        let lat = flat(1, 0);
        let want = -log_softmax(lat.cell(0, 0))[0];
        assert_eq!(rnnt_loss_bruteforce(&lat, &LabelSequence::empty()).unwrap(), want);
    }

    #[test]
    fn path_count_is_terminal_blank_binomial() {
        let y = LabelSequence::new(vec![1, 2]).unwrap();
        // alignments of 3 blanks and 2 labels whose last symbol is a blank: C(4, 2)
        assert_eq!(rnnt_path_count(&flat(3, 2), &y).unwrap(), 6);
        let y = LabelSequence::new(vec![1]).unwrap();
        assert_eq!(rnnt_path_count(&flat(2, 1), &y).unwrap(), 2);
    }

    #[test]
    fn scale_guard() {
        let y = LabelSequence::new(vec![1; 5]).unwrap();
        assert!(matches!(rnnt_loss_bruteforce(&flat(16, 5), &y), Err(Error::OracleScale(_))));
    }

    #[test]
    fn collapse_rules() {
        assert_eq!(ctc_collapse(&[1, 1, 0, 1, 2, 2, 0]), vec![1, 1, 2]);
        assert_eq!(ctc_collapse(&[0, 0]), Vec::<u32>::new());
    }

    #[test]
    fn repeated_label_in_three_frames_has_one_labeling() {
        let logits = Tensor2D::from_fn(3, 3, |t, k| ((t * 3 + k) as f64).sin());
        let y = LabelSequence::new(vec![1, 1]).unwrap();
        let lp: Vec<Vec<f64>> = (0..3).map(|t| log_softmax(logits.row(t))).collect();
        let want = -(lp[0][1] + lp[1][0] + lp[2][1]);
        assert!((ctc_loss_bruteforce(&logits, &y).unwrap() - want).abs() < 1e-12);
    }
}
