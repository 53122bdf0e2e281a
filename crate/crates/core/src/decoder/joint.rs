use num_traits::{Float as _, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{check_width, Result};
use crate::nn::Matrix;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointConfig {
    pub hidden: usize,
}

/// `logits = W_out · tanh(W_enc · enc + W_pred · pred + b) + b_out`
///
/// The two input projections are separable, so callers project each encoder
/// frame and each prediction output once and combine them per lattice cell.
#[derive(Clone, Debug)]
pub struct JointNetwork<M: Matrix> {
    pub(crate) encoder_proj: M,
    pub(crate) prediction_proj: M,
    pub(crate) bias: Vec<M::Elem>,
    pub(crate) output: M,
    pub(crate) output_bias: Vec<M::Elem>,
}

impl<M: Matrix> JointNetwork<M> {
    pub fn new(
        encoder_proj: M,
        prediction_proj: M,
        bias: Vec<M::Elem>,
        output: M,
        output_bias: Vec<M::Elem>,
    ) -> Result<Self> {
        let h = encoder_proj.rows();
        check_width("joint prediction projection rows", prediction_proj.rows(), h)?;
        check_width("joint bias", bias.len(), h)?;
        check_width("joint output input", output.cols(), h)?;
        check_width("joint output bias", output_bias.len(), output.rows())?;
        Ok(JointNetwork { encoder_proj, prediction_proj, bias, output, output_bias })
    }

    pub fn hidden(&self) -> usize {
        self.encoder_proj.rows()
    }

    pub fn classes(&self) -> usize {
        self.output.rows()
    }

    pub fn encoder_dim(&self) -> usize {
        self.encoder_proj.cols()
    }

    pub fn prediction_dim(&self) -> usize {
        self.prediction_proj.cols()
    }

    pub fn project_encoder(&self, enc: &[M::Elem]) -> Result<Vec<M::Elem>> {
        check_width("joint encoder input", enc.len(), self.encoder_dim())?;
        let mut out = vec![M::Elem::zero(); self.hidden()];
        self.encoder_proj.matvec_into(enc, &mut out);
        Ok(out)
    }

    /// Prediction projection with the hidden bias folded in.
    pub fn project_prediction(&self, pred: &[M::Elem]) -> Result<Vec<M::Elem>> {
        check_width("joint prediction input", pred.len(), self.prediction_dim())?;
        let mut out = vec![M::Elem::zero(); self.hidden()];
        self.prediction_proj.matvec_into(pred, &mut out);
        for (o, &b) in out.iter_mut().zip(&self.bias) {
            *o += b;
        }
        Ok(out)
    }

    /// Logits from already projected inputs.
    pub fn combine(&self, enc_proj: &[M::Elem], pred_proj: &[M::Elem], out: &mut [M::Elem]) {
        let hidden: Vec<M::Elem> = enc_proj.iter().zip(pred_proj).map(|(&a, &b)| (a + b).tanh()).collect();
        self.output.matvec_into(&hidden, out);
        for (o, &b) in out.iter_mut().zip(&self.output_bias) {
            *o += b;
        }
    }

    pub fn logits(&self, enc: &[M::Elem], pred: &[M::Elem]) -> Result<Vec<M::Elem>> {
        let a = self.project_encoder(enc)?;
        let b = self.project_prediction(pred)?;
        let mut out = vec![M::Elem::zero(); self.classes()];
        self.combine(&a, &b, &mut out);
        Ok(out)
    }

    pub(crate) fn map<M2: Matrix>(
        &self,
        fm: &mut dyn FnMut(&M) -> M2,
        fv: &mut dyn FnMut(&[M::Elem]) -> Vec<M2::Elem>,
    ) -> JointNetwork<M2> {
        JointNetwork {
            encoder_proj: fm(&self.encoder_proj),
            prediction_proj: fm(&self.prediction_proj),
            bias: fv(&self.bias),
            output: fm(&self.output),
            output_bias: fv(&self.output_bias),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{log_softmax, Tensor2D};

    fn joint4() -> JointNetwork<Tensor2D<f64>> {
        let m = |r, c, s: f64| Tensor2D::from_fn(r, c, move |i, j| ((i * c + j) as f64 * s).sin() * 0.5);
        JointNetwork::new(m(4, 4, 0.3), m(4, 4, 0.7), vec![0.1, -0.1, 0.2, 0.0], m(3, 4, 1.1), vec![0.0, 0.3, -0.3])
            .unwrap()
    }

    #[test]
    fn zero_weights_give_uniform_distribution() {
        let z = |r, c| Tensor2D::<f64>::zeros(r, c);
        let j = JointNetwork::new(z(2, 3), z(2, 2), vec![0.0; 2], z(5, 2), vec![0.0; 5]).unwrap();
        let lp = log_softmax(&j.logits(&[1.0, 2.0, 3.0], &[4.0, 5.0]).unwrap());
        assert!(lp.iter().all(|&v| (v + 5f64.ln()).abs() < 1e-12));
    }

    #[test]
    fn matches_scalar_loop_oracle() {
        let j = joint4();
        let enc = [0.5, -1.0, 0.25, 2.0];
        let pred = [1.0, 0.0, -0.5, 0.75];
        let got = j.logits(&enc, &pred).unwrap();
        let mut hidden = [0.0; 4];
        for h in 0..4 {
            let mut s = j.bias[h];
            for i in 0..4 {
                s += j.encoder_proj.get(h, i) * enc[i] + j.prediction_proj.get(h, i) * pred[i];
            }
            hidden[h] = s.tanh();
        }
        for k in 0..3 {
            let mut s = j.output_bias[k];
            for h in 0..4 {
                s += j.output.get(k, h) * hidden[h];
            }
            assert!((got[k] - s).abs() < 1e-12);
        }
        assert_eq!(got, j.logits(&enc, &pred).unwrap());
    }

    #[test]
    fn width_mismatch() {
        assert!(joint4().logits(&[1.0; 3], &[1.0; 4]).is_err());
    }
}
