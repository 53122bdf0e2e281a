//! The complete transducer: frontend settings, encoder, prediction network,
//! joint network and output vocabulary, plus the named-parameter plumbing
//! shared by random initialization, the container format and quantization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{JointConfig, JointNetwork, PredictionConfig, PredictionNetwork};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{check_width, Error, Result};
use crate::nn::{Float, GateShift, LstmLayer, Matrix, Tensor2D};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrontendConfig {
    pub left_context: usize,
    pub downsample: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Raw feature width before stacking.
    pub feature_dim: usize,
    pub frontend: FrontendConfig,
    pub encoder: EncoderConfig,
    pub prediction: PredictionConfig,
    pub joint: JointConfig,
    /// Output units; unit `i` has ID `i + 1`, ID 0 is the blank.
    pub vocabulary: Vec<String>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocabulary.is_empty() {
            return Err(Error::config("vocabulary is empty"));
        }
        if self.frontend.downsample == 0 {
            return Err(Error::config("frontend downsample must be at least 1"));
        }
        check_width(
            "encoder input",
            self.encoder.input_dim,
            self.feature_dim * (self.frontend.left_context + 1),
        )?;
        if self.joint.hidden == 0 {
            return Err(Error::config("joint hidden width must be positive"));
        }
        self.encoder.validate()?;
        self.prediction.validate()
    }

    /// Blank plus every vocabulary unit.
    pub fn num_classes(&self) -> usize {
        self.vocabulary.len() + 1
    }

    /// Every parameter in canonical order.
    pub fn layout(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        let enc = &self.encoder;
        for i in 0..enc.num_layers {
            lstm_layout(
                &mut out,
                &format!("encoder.{i}"),
                enc.layer_input_dim(i),
                enc.units,
                enc.projection_dim,
                enc.layer_norm,
            );
        }
        let pred = &self.prediction;
        out.push(ParamSpec::matrix("prediction.embedding", self.num_classes(), pred.embedding_dim));
        for i in 0..pred.num_layers {
            lstm_layout(
                &mut out,
                &format!("prediction.{i}"),
                pred.layer_input_dim(i),
                pred.units,
                pred.projection_dim,
                pred.layer_norm,
            );
        }
        let h = self.joint.hidden;
        out.push(ParamSpec::matrix("joint.encoder", h, enc.output_dim()));
        out.push(ParamSpec::matrix("joint.prediction", h, pred.output_dim()));
        out.push(ParamSpec::vector("joint.bias", h, VectorKind::Bias));
        out.push(ParamSpec::matrix("joint.output", self.num_classes(), h));
        out.push(ParamSpec::vector("joint.output_bias", self.num_classes(), VectorKind::Bias));
        out
    }
}

fn lstm_layout(out: &mut Vec<ParamSpec>, prefix: &str, input: usize, units: usize, proj: usize, norm: bool) {
    let width = if proj == 0 { units } else { proj };
    out.push(ParamSpec::matrix(format!("{prefix}.input"), 4 * units, input));
    out.push(ParamSpec::matrix(format!("{prefix}.recurrent"), 4 * units, width));
    if norm {
        out.push(ParamSpec::vector(format!("{prefix}.norm_gain"), 4 * units, VectorKind::Gain));
        out.push(ParamSpec::vector(format!("{prefix}.norm_bias"), 4 * units, VectorKind::GateBias { units }));
    } else {
        out.push(ParamSpec::vector(format!("{prefix}.bias"), 4 * units, VectorKind::GateBias { units }));
    }
    if proj != 0 {
        out.push(ParamSpec::matrix(format!("{prefix}.projection"), proj, units));
    }
}

/// How a vector parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VectorKind {
    /// Stacked `[i, f, g, o]` gate bias; the forget block starts at 1.
    GateBias { units: usize },
    /// Layer-norm gain; starts at 1.
    Gain,
    Bias,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Matrix { rows: usize, cols: usize },
    Vector { len: usize, kind: VectorKind },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Shape,
}

impl ParamSpec {
    fn matrix(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        ParamSpec { name: name.into(), shape: Shape::Matrix { rows, cols } }
    }

    fn vector(name: impl Into<String>, len: usize, kind: VectorKind) -> Self {
        ParamSpec { name: name.into(), shape: Shape::Vector { len, kind } }
    }
}

/// Supplies named parameters while a model is assembled. Requests arrive in
/// [`ModelConfig::layout`] order.
pub trait ParamSource<M: Matrix> {
    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<M>;
    fn vector(&mut self, name: &str, len: usize, kind: VectorKind) -> Result<Vec<M::Elem>>;
}

/// Uniform `±1/sqrt(fan_in)` matrices, zero biases, unit gains, forget-gate
/// bias 1.
pub struct RandomInit {
    rng: ChaCha8Rng,
}

impl RandomInit {
    pub fn new(seed: u64) -> Self {
        RandomInit { rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl<F: Float> ParamSource<Tensor2D<F>> for RandomInit {
    fn matrix(&mut self, _name: &str, rows: usize, cols: usize) -> Result<Tensor2D<F>> {
        let bound = 1.0 / (cols as f64).sqrt();
        Ok(Tensor2D::from_fn(rows, cols, |_, _| F::from_f64_lossy(self.rng.random_range(-bound..bound))))
    }

    fn vector(&mut self, _name: &str, len: usize, kind: VectorKind) -> Result<Vec<F>> {
        Ok(initial_vector(len, kind))
    }
}

pub(crate) fn initial_vector<F: Float>(len: usize, kind: VectorKind) -> Vec<F> {
    match kind {
        VectorKind::Gain => vec![F::one(); len],
        VectorKind::Bias => vec![F::zero(); len],
        VectorKind::GateBias { units } => {
            (0..len).map(|k| if k / units == 1 { F::one() } else { F::zero() }).collect()
        }
    }
}

/// A borrowed parameter.
pub enum Param<'a, M: Matrix> {
    Matrix(&'a M),
    Vector(&'a [M::Elem]),
}

#[derive(Clone, Debug)]
pub struct Model<M: Matrix> {
    config: ModelConfig,
    pub(crate) encoder: Encoder<M>,
    pub(crate) prediction: PredictionNetwork<M>,
    pub(crate) joint: JointNetwork<M>,
}

/// Single-precision inference model.
pub type FloatModel = Model<Tensor2D<f32>>;

impl<M: Matrix> Model<M> {
    pub fn build(config: ModelConfig, src: &mut dyn ParamSource<M>) -> Result<Self> {
        config.validate()?;
        let enc = &config.encoder;
        let encoder_layers = (0..enc.num_layers)
            .map(|i| {
                build_lstm(
                    src,
                    &format!("encoder.{i}"),
                    enc.layer_input_dim(i),
                    enc.units,
                    enc.projection_dim,
                    enc.layer_norm,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let encoder = Encoder::new(enc.clone(), encoder_layers)?;

        let pred = &config.prediction;
        let embedding = src.matrix("prediction.embedding", config.num_classes(), pred.embedding_dim)?;
        let pred_layers = (0..pred.num_layers)
            .map(|i| {
                build_lstm(
                    src,
                    &format!("prediction.{i}"),
                    pred.layer_input_dim(i),
                    pred.units,
                    pred.projection_dim,
                    pred.layer_norm,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let prediction = PredictionNetwork::new(pred.clone(), embedding, pred_layers)?;

        let h = config.joint.hidden;
        let classes = config.num_classes();
        let joint = JointNetwork::new(
            src.matrix("joint.encoder", h, enc.output_dim())?,
            src.matrix("joint.prediction", h, pred.output_dim())?,
            src.vector("joint.bias", h, VectorKind::Bias)?,
            src.matrix("joint.output", classes, h)?,
            src.vector("joint.output_bias", classes, VectorKind::Bias)?,
        )?;
        Ok(Model { config, encoder, prediction, joint })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn encoder(&self) -> &Encoder<M> {
        &self.encoder
    }

    pub fn prediction(&self) -> &PredictionNetwork<M> {
        &self.prediction
    }

    pub fn joint(&self) -> &JointNetwork<M> {
        &self.joint
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes()
    }

    /// Unit name for a label ID (`None` for the blank or out-of-range IDs).
    pub fn unit_name(&self, id: u32) -> Option<&str> {
        (id as usize).checked_sub(1).and_then(|i| self.config.vocabulary.get(i)).map(String::as_str)
    }

    pub fn unit_id(&self, name: &str) -> Option<u32> {
        self.config.vocabulary.iter().position(|v| v == name).map(|i| i as u32 + 1)
    }

    /// Space-joined unit names.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter().map(|&id| self.unit_name(id).unwrap_or("<unk>")).collect::<Vec<_>>().join(" ")
    }

    /// Visits every parameter in [`ModelConfig::layout`] order.
    pub fn visit(&self, f: &mut dyn FnMut(&str, Param<'_, M>)) {
        for (i, l) in self.encoder.layers.iter().enumerate() {
            visit_lstm(&format!("encoder.{i}"), l, f);
        }
        f("prediction.embedding", Param::Matrix(&self.prediction.embedding));
        for (i, l) in self.prediction.layers.iter().enumerate() {
            visit_lstm(&format!("prediction.{i}"), l, f);
        }
        let j = &self.joint;
        f("joint.encoder", Param::Matrix(&j.encoder_proj));
        f("joint.prediction", Param::Matrix(&j.prediction_proj));
        f("joint.bias", Param::Vector(&j.bias));
        f("joint.output", Param::Matrix(&j.output));
        f("joint.output_bias", Param::Vector(&j.output_bias));
    }

    /// Converts every matrix with `fm` and every vector with `fv`.
    pub fn map<M2: Matrix>(
        &self,
        fm: &mut dyn FnMut(&M) -> M2,
        fv: &mut dyn FnMut(&[M::Elem]) -> Vec<M2::Elem>,
    ) -> Model<M2> {
        Model {
            config: self.config.clone(),
            encoder: self.encoder.map(fm, fv),
            prediction: self.prediction.map(fm, fv),
            joint: self.joint.map(fm, fv),
        }
    }
}

impl<F: Float> Model<Tensor2D<F>> {
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        Model::build(config, &mut RandomInit::new(seed))
    }

    /// Same structure with every parameter zero.
    pub fn zeros_like(&self) -> Self {
        self.map(&mut |m| Tensor2D::zeros(m.rows(), m.cols()), &mut |v| vec![F::zero(); v.len()])
    }

    pub fn cast<G: Float>(&self) -> Model<Tensor2D<G>> {
        self.map(&mut |m| m.map(|v| G::from_f64_lossy(v.to_f64_lossy())), &mut |v| {
            v.iter().map(|&x| G::from_f64_lossy(x.to_f64_lossy())).collect()
        })
    }

    /// Mutable access to every parameter's values, in layout order.
    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [F])) {
        for l in self.encoder.layers.iter_mut() {
            visit_lstm_mut(l, f);
        }
        f(self.prediction.embedding.data_mut());
        for l in self.prediction.layers.iter_mut() {
            visit_lstm_mut(l, f);
        }
        let j = &mut self.joint;
        f(j.encoder_proj.data_mut());
        f(j.prediction_proj.data_mut());
        f(&mut j.bias);
        f(j.output.data_mut());
        f(&mut j.output_bias);
    }

    /// All parameter values concatenated in layout order.
    pub fn flatten(&self) -> Vec<F> {
        let mut out = Vec::new();
        self.visit(&mut |_, p| match p {
            Param::Matrix(m) => out.extend_from_slice(m.data()),
            Param::Vector(v) => out.extend_from_slice(v),
        });
        out
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn unflatten(&mut self, values: &[F]) -> Result<()> {
        let total = self.flatten().len();
        check_width("flat parameter vector", values.len(), total)?;
        let mut pos = 0;
        self.visit_mut(&mut |s| {
            s.copy_from_slice(&values[pos..pos + s.len()]);
            pos += s.len();
        });
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, p| {
            n += match p {
                Param::Matrix(m) => m.rows() * m.cols(),
                Param::Vector(v) => v.len(),
            }
        });
        n
    }
}

fn build_lstm<M: Matrix>(
    src: &mut dyn ParamSource<M>,
    prefix: &str,
    input: usize,
    units: usize,
    proj: usize,
    norm: bool,
) -> Result<LstmLayer<M>> {
    let width = if proj == 0 { units } else { proj };
    let wx = src.matrix(&format!("{prefix}.input"), 4 * units, input)?;
    let wh = src.matrix(&format!("{prefix}.recurrent"), 4 * units, width)?;
    let shift = if norm {
        GateShift::Norm {
            gain: src.vector(&format!("{prefix}.norm_gain"), 4 * units, VectorKind::Gain)?,
            bias: src.vector(&format!("{prefix}.norm_bias"), 4 * units, VectorKind::GateBias { units })?,
        }
    } else {
        GateShift::Bias(src.vector(&format!("{prefix}.bias"), 4 * units, VectorKind::GateBias { units })?)
    };
    let projection = if proj == 0 { None } else { Some(src.matrix(&format!("{prefix}.projection"), proj, units)?) };
    LstmLayer::new(wx, wh, shift, projection)
}

fn visit_lstm<M: Matrix>(prefix: &str, l: &LstmLayer<M>, f: &mut dyn FnMut(&str, Param<'_, M>)) {
    f(&format!("{prefix}.input"), Param::Matrix(&l.input));
    f(&format!("{prefix}.recurrent"), Param::Matrix(&l.recurrent));
    match &l.shift {
        GateShift::Bias(b) => f(&format!("{prefix}.bias"), Param::Vector(b)),
        GateShift::Norm { gain, bias } => {
            f(&format!("{prefix}.norm_gain"), Param::Vector(gain));
            f(&format!("{prefix}.norm_bias"), Param::Vector(bias));
        }
    }
    if let Some(p) = &l.projection {
        f(&format!("{prefix}.projection"), Param::Matrix(p));
    }
}

fn visit_lstm_mut<F: Float>(l: &mut LstmLayer<Tensor2D<F>>, f: &mut dyn FnMut(&mut [F])) {
    f(l.input.data_mut());
    f(l.recurrent.data_mut());
    match &mut l.shift {
        GateShift::Bias(b) => f(b),
        GateShift::Norm { gain, bias } => {
            f(gain);
            f(bias);
        }
    }
    if let Some(p) = &mut l.projection {
        f(p.data_mut());
    }
}
