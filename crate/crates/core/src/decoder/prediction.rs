use num_traits::Zero;
use serde::{Deserialize, Serialize};

use crate::error::{check_width, Error, Result};
use crate::nn::{LstmLayer, LstmState, Matrix};

/// Embedding row fed before the first label. Blank is never an input, so its
/// ID is reused for the start token.
pub const SOS: u32 = 0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionConfig {
    pub embedding_dim: usize,
    pub num_layers: usize,
    pub units: usize,
    /// 0 disables projection.
    pub projection_dim: usize,
    pub layer_norm: bool,
}

impl PredictionConfig {
    pub fn output_dim(&self) -> usize {
        if self.projection_dim == 0 {
            self.units
        } else {
            self.projection_dim
        }
    }

    pub fn layer_input_dim(&self, layer: usize) -> usize {
        if layer == 0 {
            self.embedding_dim
        } else {
            self.output_dim()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 || self.units == 0 || self.num_layers == 0 {
            return Err(Error::config("prediction network dims must be positive"));
        }
        Ok(())
    }
}

/// Label-history network: embedding lookup followed by an LSTM stack.
#[derive(Clone, Debug)]
pub struct PredictionNetwork<M: Matrix> {
    config: PredictionConfig,
    pub(crate) embedding: M,
    pub(crate) layers: Vec<LstmLayer<M>>,
}

impl<M: Matrix> PredictionNetwork<M> {
    pub fn new(config: PredictionConfig, embedding: M, layers: Vec<LstmLayer<M>>) -> Result<Self> {
        config.validate()?;
        check_width("embedding width", embedding.cols(), config.embedding_dim)?;
        check_width("prediction layer count", layers.len(), config.num_layers)?;
        for (i, layer) in layers.iter().enumerate() {
            check_width("prediction layer input", layer.input_width(), config.layer_input_dim(i))?;
            check_width("prediction layer output", layer.output_width(), config.output_dim())?;
        }
        Ok(PredictionNetwork { config, embedding, layers })
    }

    pub fn config(&self) -> &PredictionConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LstmLayer<M>] {
        &self.layers
    }

    pub fn embedding(&self) -> &M {
        &self.embedding
    }

    /// Number of embedding rows (labels plus the start token).
    pub fn num_symbols(&self) -> usize {
        self.embedding.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    pub fn zero_state(&self) -> Vec<LstmState<M::Elem>> {
        self.layers.iter().map(|l| l.zero_state()).collect()
    }

    /// Consumes one symbol (`SOS` or a label), returning the new state; the
    /// network output is the last layer's `output`.
    pub fn step(&self, symbol: u32, state: &[LstmState<M::Elem>]) -> Result<Vec<LstmState<M::Elem>>> {
        if symbol as usize >= self.num_symbols() {
            return Err(Error::config(format!("symbol {symbol} outside {} embedding rows", self.num_symbols())));
        }
        check_width("prediction state layers", state.len(), self.layers.len())?;
        let mut x = vec![M::Elem::zero(); self.config.embedding_dim];
        self.embedding.row_into(symbol as usize, &mut x);
        let mut next = Vec::with_capacity(self.layers.len());
        for (layer, s) in self.layers.iter().zip(state) {
            let n = layer.step(&x, s)?;
            x.clone_from(&n.output);
            next.push(n);
        }
        Ok(next)
    }

    pub(crate) fn map<M2: Matrix>(
        &self,
        fm: &mut dyn FnMut(&M) -> M2,
        fv: &mut dyn FnMut(&[M::Elem]) -> Vec<M2::Elem>,
    ) -> PredictionNetwork<M2> {
        PredictionNetwork {
            config: self.config.clone(),
            embedding: fm(&self.embedding),
            layers: self.layers.iter().map(|l| l.map(fm, fv)).collect(),
        }
    }
}
