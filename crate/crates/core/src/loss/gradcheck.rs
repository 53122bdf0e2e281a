use super::{ctc_loss, rnnt_loss, LabelSequence, Lattice};
use crate::error::Result;
use crate::nn::Tensor2D;

/// Magnitude below which gradient differences are judged absolutely rather
/// than relatively; central differences at ε = 1e-4 carry O(ε²) truncation
/// error that would otherwise dominate near-zero entries.
pub const GRAD_CHECK_FLOOR: f64 = 1e-3;

/// `|a − n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Compares `analytic` against central differences of `loss` around
/// `params`, returning the largest relative error. `params` is restored.
pub fn finite_difference_check(
    params: &mut [f64],
    analytic: &[f64],
    epsilon: f64,
    mut loss: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<f64> {
    assert_eq!(params.len(), analytic.len());
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let orig = params[i];
        params[i] = orig + epsilon;
        let up = loss(params)?;
        params[i] = orig - epsilon;
        let down = loss(params)?;
        params[i] = orig;
        let numeric = (up - down) / (2.0 * epsilon);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// Largest relative error between [`rnnt_loss`] gradients and central
/// differences over every logit of the lattice.
pub fn rnnt_grad_check(lattice: &Lattice, labels: &LabelSequence, epsilon: f64) -> Result<f64> {
    let grad = rnnt_loss(lattice, labels)?.posteriors.grad;
    let mut probe = lattice.clone();
    let mut params = lattice.logits().to_vec();
    finite_difference_check(&mut params, &grad, epsilon, |p| {
        probe.logits_mut().copy_from_slice(p);
        Ok(rnnt_loss(&probe, labels)?.loss)
    })
}

pub fn ctc_grad_check(frame_logits: &Tensor2D<f64>, labels: &LabelSequence, epsilon: f64) -> Result<f64> {
    let grad = ctc_loss(frame_logits, labels)?.grad;
    let mut probe = frame_logits.clone();
    let mut params = frame_logits.data().to_vec();
    finite_difference_check(&mut params, grad.data(), epsilon, |p| {
        probe.data_mut().copy_from_slice(p);
        Ok(ctc_loss(&probe, labels)?.loss)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rnnt_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let lat = Lattice::from_fn(3, 2, 4, |_, _, _| rng.random_range(-2.0..2.0)).unwrap();
        let y = LabelSequence::new(vec![3, 1]).unwrap();
        let err = rnnt_grad_check(&lat, &y, 1e-4).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn ctc_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let logits = Tensor2D::from_fn(4, 3, |_, _| rng.random_range(-2.0..2.0));
        let y = LabelSequence::new(vec![1, 1]).unwrap();
        let err = ctc_grad_check(&logits, &y, 1e-4).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn floor_applies_only_near_zero() {
        assert_eq!(relative_error(2.0, 1.0), 0.5);
        assert!((relative_error(1e-9, 0.0) - 1e-6).abs() < 1e-18);
    }
}
