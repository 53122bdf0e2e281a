use super::{LabelSequence, Lattice, BLANK};
use crate::error::{Error, Result};
use crate::nn::{log_softmax, logaddexp};

/// Forward/backward grids and logit gradients of one lattice.
#[derive(Clone, Debug)]
pub struct LatticePosteriors {
    pub frames: usize,
    pub targets: usize,
    /// Normalized log-probabilities, same layout as the lattice logits.
    pub log_probs: Vec<f64>,
    /// `alpha[t·(U+1) + u]`: log-probability of reaching `(t, u)`.
    pub alpha: Vec<f64>,
    /// `beta[t·(U+1) + u]`: log-probability of finishing from `(t, u)`,
    /// including the terminal blank.
    pub beta: Vec<f64>,
    /// `∂(−log P(y|x)) / ∂logit`, same layout as the lattice logits.
    pub grad: Vec<f64>,
}

impl LatticePosteriors {
    pub fn alpha(&self, t: usize, u: usize) -> f64 {
        self.alpha[t * (self.targets + 1) + u]
    }

    pub fn beta(&self, t: usize, u: usize) -> f64 {
        self.beta[t * (self.targets + 1) + u]
    }
}

#[derive(Clone, Debug)]
pub struct RnntLoss {
    /// `−log P(y|x)`
    pub loss: f64,
    pub posteriors: LatticePosteriors,
}

/// Transducer loss with exact gradients.
///
/// Alignments move right (emit `y[u]`, staying on frame `t`) or down (emit
/// blank, advancing to `t + 1`) and terminate with a blank emitted from the
/// last cell `(T'−1, U)`.
pub fn rnnt_loss(lattice: &Lattice, labels: &LabelSequence) -> Result<RnntLoss> {
    let frames = lattice.frames();
    let u_max = labels.len();
    if lattice.targets() != u_max {
        return Err(Error::config(format!(
            "lattice built for {} targets, label sequence has {u_max}",
            lattice.targets()
        )));
    }
    labels.check_classes(lattice.classes())?;
    if frames == 0 {
        return Err(Error::Infeasible { frames, labels: u_max });
    }
    let y = labels.as_slice();
    let classes = lattice.classes();
    let width = u_max + 1;

    let mut log_probs = Vec::with_capacity(lattice.logits().len());
    for cell in lattice.logits().chunks_exact(classes) {
        log_probs.extend(log_softmax(cell));
    }
    let at = |t: usize, u: usize, k: u32| log_probs[(t * width + u) * classes + k as usize];

    let mut alpha = vec![f64::NEG_INFINITY; frames * width];
    alpha[0] = 0.0;
    for t in 0..frames {
        for u in 0..width {
            if t == 0 && u == 0 {
                continue;
            }
            let mut a = f64::NEG_INFINITY;
            if t > 0 {
                a = alpha[(t - 1) * width + u] + at(t - 1, u, BLANK);
            }
            if u > 0 {
                a = logaddexp(a, alpha[t * width + u - 1] + at(t, u - 1, y[u - 1]));
            }
            alpha[t * width + u] = a;
        }
    }
    let last = (frames - 1) * width + u_max;
    let log_likelihood = alpha[last] + at(frames - 1, u_max, BLANK);

    let mut beta = vec![f64::NEG_INFINITY; frames * width];
    beta[last] = at(frames - 1, u_max, BLANK);
    for t in (0..frames).rev() {
        for u in (0..width).rev() {
            if t == frames - 1 && u == u_max {
                continue;
            }
            let mut b = f64::NEG_INFINITY;
            if t + 1 < frames {
                b = beta[(t + 1) * width + u] + at(t, u, BLANK);
            }
            if u < u_max {
                b = logaddexp(b, beta[t * width + u + 1] + at(t, u, y[u]));
            }
            beta[t * width + u] = b;
        }
    }

    let mut grad = vec![0.0; log_probs.len()];
    let mut dlp = vec![0.0; classes];
    for t in 0..frames {
        for u in 0..width {
            let a = alpha[t * width + u];
            if a == f64::NEG_INFINITY {
                continue;
            }
            dlp.iter_mut().for_each(|v| *v = 0.0);
            let after_blank = if t + 1 < frames {
                beta[(t + 1) * width + u]
            } else if u == u_max {
                0.0
            } else {
                f64::NEG_INFINITY
            };
            dlp[BLANK as usize] = -(a + at(t, u, BLANK) + after_blank - log_likelihood).exp();
            if u < u_max {
                dlp[y[u] as usize] = -(a + at(t, u, y[u]) + beta[t * width + u + 1] - log_likelihood).exp();
            }
            // chain through log-softmax: ∂/∂z_k = g_k − p_k Σ_j g_j
            let total: f64 = dlp.iter().sum();
            let base = (t * width + u) * classes;
            for k in 0..classes {
                grad[base + k] = dlp[k] - log_probs[base + k].exp() * total;
            }
        }
    }

    Ok(RnntLoss {
        loss: -log_likelihood,
        posteriors: LatticePosteriors { frames, targets: u_max, log_probs, alpha, beta, grad },
    })
}
