use super::{LabelSequence, BLANK};
use crate::error::{Error, Result};
use crate::nn::{log_softmax, logaddexp, Tensor2D};

#[derive(Clone, Debug)]
pub struct CtcLoss {
    /// `−log P(y|x)`
    pub loss: f64,
    /// `∂loss/∂logit`, `frames × classes`.
    pub grad: Tensor2D<f64>,
}

/// CTC loss over per-frame logits (`frames × classes`, blank in column 0).
pub fn ctc_loss(frame_logits: &Tensor2D<f64>, labels: &LabelSequence) -> Result<CtcLoss> {
    let frames = frame_logits.rows();
    let classes = frame_logits.cols();
    labels.check_classes(classes)?;
    let y = labels.as_slice();
    let repeats = y.windows(2).filter(|w| w[0] == w[1]).count();
    if frames < y.len() + repeats {
        return Err(Error::Infeasible { frames, labels: y.len() });
    }

    // blank-interleaved targets: b y1 b y2 ... b
    let ext: Vec<u32> = std::iter::once(BLANK).chain(y.iter().flat_map(|&l| [l, BLANK])).collect();
    let s_len = ext.len();
    let lp: Vec<Vec<f64>> = (0..frames).map(|t| log_softmax(frame_logits.row(t))).collect();
    let skip_ok = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];

    let ninf = f64::NEG_INFINITY;
    let mut alpha = vec![vec![ninf; s_len]; frames];
    alpha[0][0] = lp[0][BLANK as usize];
    if s_len > 1 {
        alpha[0][1] = lp[0][ext[1] as usize];
    }
    for t in 1..frames {
        for s in 0..s_len {
            let mut a = alpha[t - 1][s];
            if s >= 1 {
                a = logaddexp(a, alpha[t - 1][s - 1]);
            }
            if skip_ok(s) {
                a = logaddexp(a, alpha[t - 1][s - 2]);
            }
            alpha[t][s] = a + lp[t][ext[s] as usize];
        }
    }

    let mut beta = vec![vec![ninf; s_len]; frames];
    let last = frames - 1;
    beta[last][s_len - 1] = lp[last][ext[s_len - 1] as usize];
    if s_len > 1 {
        beta[last][s_len - 2] = lp[last][ext[s_len - 2] as usize];
    }
    for t in (0..last).rev() {
        for s in 0..s_len {
            let mut b = beta[t + 1][s];
            if s + 1 < s_len {
                b = logaddexp(b, beta[t + 1][s + 1]);
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                b = logaddexp(b, beta[t + 1][s + 2]);
            }
            beta[t][s] = b + lp[t][ext[s] as usize];
        }
    }

    let mut log_likelihood = alpha[last][s_len - 1];
    if s_len > 1 {
        log_likelihood = logaddexp(log_likelihood, alpha[last][s_len - 2]);
    }

    let mut grad = Tensor2D::zeros(frames, classes);
    let mut dlp = vec![0.0; classes];
    for t in 0..frames {
        // occupancy of each symbol, divided through by its own probability
        let mut occ = vec![ninf; classes];
        for s in 0..s_len {
            let k = ext[s] as usize;
            occ[k] = logaddexp(occ[k], alpha[t][s] + beta[t][s]);
        }
        for k in 0..classes {
            dlp[k] = -(occ[k] - lp[t][k] - log_likelihood).exp();
        }
        let total: f64 = dlp.iter().sum();
        for (k, g) in grad.row_mut(t).iter_mut().enumerate() {
            *g = dlp[k] - lp[t][k].exp() * total;
        }
    }
    Ok(CtcLoss { loss: -log_likelihood, grad })
}
