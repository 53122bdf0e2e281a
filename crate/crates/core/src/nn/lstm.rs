use num_traits::{Float as _, Zero};

use super::ops::{normalize_in_place, sigmoid, LAYER_NORM_EPSILON};
use super::tensor::{Float, Matrix};
use crate::error::{check_width, Error, Result};

/// Recurrent state of one LSTM layer. `output` has the post-projection width.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState<F> {
    pub cell: Vec<F>,
    pub output: Vec<F>,
}

impl<F: Float> LstmState<F> {
    pub fn zeros(units: usize, output_width: usize) -> Self {
        LstmState { cell: vec![F::zero(); units], output: vec![F::zero(); output_width] }
    }
}

/// What gets added to (or applied to) the gate pre-activations.
#[derive(Clone, Debug, PartialEq)]
pub enum GateShift<F> {
    /// Plain bias.
    Bias(Vec<F>),
    /// Layer norm over each gate block; its bias plays the role of the gate bias.
    Norm { gain: Vec<F>, bias: Vec<F> },
}

impl<F: Float> GateShift<F> {
    pub fn bias(&self) -> &[F] {
        match self {
            GateShift::Bias(b) => b,
            GateShift::Norm { bias, .. } => bias,
        }
    }

    pub fn is_norm(&self) -> bool {
        matches!(self, GateShift::Norm { .. })
    }
}

/// One LSTM layer with gates stacked `[input, forget, candidate, output]`,
/// each `units` rows, and an optional output projection.
#[derive(Clone, Debug)]
pub struct LstmLayer<M: Matrix> {
    pub(crate) input: M,
    pub(crate) recurrent: M,
    pub(crate) shift: GateShift<M::Elem>,
    pub(crate) projection: Option<M>,
    units: usize,
}

/// Forward intermediates of one step, kept for backpropagation.
#[derive(Clone, Debug, Default)]
pub struct StepTrace<F> {
    pub input: Vec<F>,
    pub prev_output: Vec<F>,
    pub prev_cell: Vec<F>,
    /// Normalized gate pre-activations (only with layer norm).
    pub normalized: Vec<F>,
    pub inv_std: [F; 4],
    /// Activated gates `[i, f, g, o]`.
    pub gates: Vec<F>,
    pub cell: Vec<F>,
    pub cell_tanh: Vec<F>,
    /// Pre-projection output `o ⊙ tanh(c)`.
    pub hidden: Vec<F>,
}

impl<M: Matrix> LstmLayer<M> {
    pub fn new(input: M, recurrent: M, shift: GateShift<M::Elem>, projection: Option<M>) -> Result<Self> {
        let rows = input.rows();
        if !rows.is_multiple_of(4) || rows == 0 {
            return Err(Error::config(format!("gate matrix rows {rows} not a positive multiple of 4")));
        }
        let units = rows / 4;
        check_width("recurrent gate rows", recurrent.rows(), rows)?;
        let out_width = match &projection {
            Some(p) => {
                check_width("projection input", p.cols(), units)?;
                p.rows()
            }
            None => units,
        };
        check_width("recurrent input", recurrent.cols(), out_width)?;
        match &shift {
            GateShift::Bias(b) => check_width("gate bias", b.len(), rows)?,
            GateShift::Norm { gain, bias } => {
                check_width("layer-norm gain", gain.len(), rows)?;
                check_width("layer-norm bias", bias.len(), rows)?;
            }
        }
        Ok(LstmLayer { input, recurrent, shift, projection, units })
    }

    pub fn units(&self) -> usize {
        self.units
    }

    pub fn input_width(&self) -> usize {
        self.input.cols()
    }

    pub fn output_width(&self) -> usize {
        self.projection.as_ref().map_or(self.units, |p| p.rows())
    }

    pub fn has_layer_norm(&self) -> bool {
        self.shift.is_norm()
    }

    pub fn input_matrix(&self) -> &M {
        &self.input
    }

    pub fn recurrent_matrix(&self) -> &M {
        &self.recurrent
    }

    pub fn projection_matrix(&self) -> Option<&M> {
        self.projection.as_ref()
    }

    pub fn shift(&self) -> &GateShift<M::Elem> {
        &self.shift
    }

    pub fn zero_state(&self) -> LstmState<M::Elem> {
        LstmState::zeros(self.units, self.output_width())
    }

    /// One time step; returns the successor state whose `output` is the layer
    /// output.
    pub fn step(&self, x: &[M::Elem], state: &LstmState<M::Elem>) -> Result<LstmState<M::Elem>> {
        self.check(x, state)?;
        Ok(self.forward(x, state, None))
    }

    /// Like [`step`](Self::step) but also returns the intermediates needed
    /// for backpropagation.
    pub fn step_traced(
        &self,
        x: &[M::Elem],
        state: &LstmState<M::Elem>,
    ) -> Result<(LstmState<M::Elem>, StepTrace<M::Elem>)> {
        self.check(x, state)?;
        let mut trace = StepTrace::default();
        let next = self.forward(x, state, Some(&mut trace));
        Ok((next, trace))
    }

    fn check(&self, x: &[M::Elem], state: &LstmState<M::Elem>) -> Result<()> {
        check_width("lstm input", x.len(), self.input.cols())?;
        check_width("lstm cell", state.cell.len(), self.units)?;
        check_width("lstm output", state.output.len(), self.output_width())
    }

    pub(crate) fn forward(
        &self,
        x: &[M::Elem],
        state: &LstmState<M::Elem>,
        trace: Option<&mut StepTrace<M::Elem>>,
    ) -> LstmState<M::Elem> {
        let h = self.units;
        let zero = M::Elem::zero();
        let mut z = vec![zero; 4 * h];
        let mut zr = vec![zero; 4 * h];
        self.input.matvec_into(x, &mut z);
        self.recurrent.matvec_into(&state.output, &mut zr);
        for (a, b) in z.iter_mut().zip(&zr) {
            *a += *b;
        }
        let mut inv_std = [zero; 4];
        let mut normalized = Vec::new();
        match &self.shift {
            GateShift::Bias(b) => {
                for (a, &b) in z.iter_mut().zip(b) {
                    *a += b;
                }
            }
            GateShift::Norm { gain, bias } => {
                let eps = M::Elem::from_f64_lossy(LAYER_NORM_EPSILON);
                for (g, block) in z.chunks_exact_mut(h).enumerate() {
                    inv_std[g] = normalize_in_place(block, eps);
                }
                if trace.is_some() {
                    normalized = z.clone();
                }
                for ((a, &g), &b) in z.iter_mut().zip(gain).zip(bias) {
                    *a = *a * g + b;
                }
            }
        }
        // activate in place: z becomes [i, f, g, o]
        for (k, a) in z.iter_mut().enumerate() {
            *a = if k / h == 2 { a.tanh() } else { sigmoid(*a) };
        }
        let (i_gate, rest) = z.split_at(h);
        let (f_gate, rest) = rest.split_at(h);
        let (g_gate, o_gate) = rest.split_at(h);
        let mut cell = vec![zero; h];
        let mut cell_tanh = vec![zero; h];
        let mut hidden = vec![zero; h];
        for k in 0..h {
            cell[k] = f_gate[k] * state.cell[k] + i_gate[k] * g_gate[k];
            cell_tanh[k] = cell[k].tanh();
            hidden[k] = o_gate[k] * cell_tanh[k];
        }
        let output = match &self.projection {
            Some(p) => {
                let mut out = vec![zero; p.rows()];
                p.matvec_into(&hidden, &mut out);
                out
            }
            None => hidden.clone(),
        };
        if let Some(t) = trace {
            *t = StepTrace {
                input: x.to_vec(),
                prev_output: state.output.clone(),
                prev_cell: state.cell.clone(),
                normalized,
                inv_std,
                gates: z,
                cell: cell.clone(),
                cell_tanh,
                hidden,
            };
        }
        LstmState { cell, output }
    }

    pub(crate) fn map<M2: Matrix>(
        &self,
        fm: &mut dyn FnMut(&M) -> M2,
        fv: &mut dyn FnMut(&[M::Elem]) -> Vec<M2::Elem>,
    ) -> LstmLayer<M2> {
        LstmLayer {
            input: fm(&self.input),
            recurrent: fm(&self.recurrent),
            shift: match &self.shift {
                GateShift::Bias(b) => GateShift::Bias(fv(b)),
                GateShift::Norm { gain, bias } => GateShift::Norm { gain: fv(gain), bias: fv(bias) },
            },
            projection: self.projection.as_ref().map(|p| fm(p)),
            units: self.units,
        }
    }
}
