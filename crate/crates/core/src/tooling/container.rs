//! Self-describing model container.
//!
//! Layout: the 8-byte magic `RNNTMODL`, a little-endian `u32` format
//! version, a little-endian `u32` header length, the UTF-8 JSON header, then
//! the tensor payload. The header holds the model configuration (including
//! the unit vocabulary) and, per tensor in canonical parameter order, its
//! name, dtype, shape, payload offset and quantization constants. `float32`
//! tensors are stored as little-endian `f32`; `int8_sym` and `int8_asym`
//! tensors as one byte per value.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Param, ParamSource, Shape, VectorKind};
use crate::nn::{Matrix, Tensor2D};
use crate::quant::{AsymQuantizedTensor, EngineModel, QuantizedTensor, WeightMatrix};

pub const MAGIC: &[u8; 8] = b"RNNTMODL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DType {
    Float32,
    Int8Sym,
    Int8Asym,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::Float32 => 4,
            DType::Int8Sym | DType::Int8Asym => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zero_point: Option<i32>,
}

impl TensorEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn nbytes(&self) -> usize {
        self.len() * self.dtype.width()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

/// Serializes a model (any mix of float and quantized matrices).
pub fn to_bytes(model: &EngineModel) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    model.visit(&mut |name, p| {
        let offset = payload.len();
        let mut e = TensorEntry {
            name: name.to_string(),
            dtype: DType::Float32,
            shape: Vec::new(),
            offset,
            theta: None,
            scale: None,
            zero_point: None,
        };
        match p {
            Param::Vector(v) => {
                e.shape = vec![v.len()];
                v.iter().for_each(|x| payload.extend_from_slice(&x.to_le_bytes()));
            }
            Param::Matrix(m) => {
                e.shape = vec![m.rows(), m.cols()];
                match m {
                    WeightMatrix::Float(t) => t.data().iter().for_each(|x| payload.extend_from_slice(&x.to_le_bytes())),
                    WeightMatrix::Symmetric(q) => {
                        e.dtype = DType::Int8Sym;
                        e.theta = Some(q.theta());
                        payload.extend(q.values().iter().map(|&v| v as u8));
                    }
                    WeightMatrix::Asymmetric(q) => {
                        e.dtype = DType::Int8Asym;
                        e.scale = Some(q.scale());
                        e.zero_point = Some(q.zero_point());
                        payload.extend(q.values().iter().map(|&v| v as u8));
                    }
                }
            }
        }
        tensors.push(e);
    });
    let header = serde_json::to_vec(&Header { config: model.config().clone(), tensors })?;
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parses the header and returns it with the payload slice.
pub fn read_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Format("not a model container (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Version(version));
    }
    let len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let header_bytes = bytes.get(16..16 + len).ok_or_else(|| Error::Format("truncated container header".into()))?;
    let header: Header = serde_json::from_slice(header_bytes)?;
    Ok((header, &bytes[16 + len..]))
}

struct ContainerSource<'a> {
    entries: std::slice::Iter<'a, TensorEntry>,
    payload: &'a [u8],
    end: usize,
}

impl<'a> ContainerSource<'a> {
    fn next(&mut self, name: &str, shape: &[usize]) -> Result<(&'a TensorEntry, &'a [u8])> {
        let e = self.entries.next().ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))?;
        if e.name != name || e.shape != shape {
            return Err(Error::Format(format!(
                "tensor `{}` {:?} where `{name}` {shape:?} was expected",
                e.name, e.shape
            )));
        }
        if e.offset != self.end {
            return Err(Error::Format(format!("tensor `{name}` is not contiguous")));
        }
        let bytes = self
            .payload
            .get(e.offset..e.offset + e.nbytes())
            .ok_or_else(|| Error::Format(format!("tensor `{name}` runs past the payload")))?;
        self.end += e.nbytes();
        Ok((e, bytes))
    }
}

fn f32s(bytes: &[u8]) -> Vec<f32> {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()
}

fn missing(name: &str, what: &str) -> Error {
    Error::Format(format!("tensor `{name}` lacks its {what}"))
}

impl ParamSource<WeightMatrix> for ContainerSource<'_> {
    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<WeightMatrix> {
        let (e, bytes) = self.next(name, &[rows, cols])?;
        let values = || bytes.iter().map(|&b| b as i8).collect::<Vec<_>>();
        Ok(match e.dtype {
            DType::Float32 => WeightMatrix::Float(Tensor2D::from_vec(rows, cols, f32s(bytes))?),
            DType::Int8Sym => WeightMatrix::Symmetric(QuantizedTensor::from_parts(
                rows,
                cols,
                values(),
                e.theta.ok_or_else(|| missing(name, "theta"))?,
            )?),
            DType::Int8Asym => WeightMatrix::Asymmetric(AsymQuantizedTensor::from_parts(
                rows,
                cols,
                values(),
                e.scale.ok_or_else(|| missing(name, "scale"))?,
                e.zero_point.ok_or_else(|| missing(name, "zero point"))?,
            )?),
        })
    }

    fn vector(&mut self, name: &str, len: usize, _kind: VectorKind) -> Result<Vec<f32>> {
        let (e, bytes) = self.next(name, &[len])?;
        if e.dtype != DType::Float32 {
            return Err(Error::Format(format!("vector `{name}` must be float32")));
        }
        Ok(f32s(bytes))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<EngineModel> {
    let (header, payload) = read_header(bytes)?;
    let expected = header.config.layout().len();
    if header.tensors.len() != expected {
        return Err(Error::Format(format!(
            "container has {} tensors, configuration needs {}",
            header.tensors.len(),
            expected
        )));
    }
    let mut src = ContainerSource { entries: header.tensors.iter(), payload, end: 0 };
    let model = Model::build(header.config.clone(), &mut src)?;
    if src.end != payload.len() {
        return Err(Error::Format("trailing bytes after the tensor payload".into()));
    }
    Ok(model)
}

/// Loads an unquantized container as a float model.
pub fn float_from_bytes(bytes: &[u8]) -> Result<Model<Tensor2D<f32>>> {
    let engine = from_bytes(bytes)?;
    let mut quantized = false;
    engine.visit(&mut |_, p| {
        if let Param::Matrix(m) = p {
            quantized |= m.scheme().is_some();
        }
    });
    if quantized {
        return Err(Error::Format("container holds quantized weights".into()));
    }
    Ok(engine.map(&mut |m| m.dequantize(), &mut |v| v.to_vec()))
}

pub fn save(path: &Path, model: &EngineModel) -> Result<()> {
    Ok(fs::write(path, to_bytes(model)?)?)
}

pub fn load(path: &Path) -> Result<EngineModel> {
    from_bytes(&fs::read(path)?)
}

pub fn load_float(path: &Path) -> Result<Model<Tensor2D<f32>>> {
    float_from_bytes(&fs::read(path)?)
}

/// Payload bytes of all matrix tensors and of all tensors.
pub fn payload_sizes(header: &Header) -> (usize, usize) {
    let layout = header.config.layout();
    let mut matrices = 0;
    let mut total = 0;
    for (e, spec) in header.tensors.iter().zip(&layout) {
        total += e.nbytes();
        if matches!(spec.shape, Shape::Matrix { .. }) {
            matrices += e.nbytes();
        }
    }
    (matrices, total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_config;
    use crate::model::FloatModel;
    use crate::quant::{float_engine, quantize_model, Scheme};

    #[test]
    fn float_round_trip_is_byte_identical() {
        let m = FloatModel::random(tiny_config(5, 3), 1).unwrap();
        let bytes = to_bytes(&float_engine(&m)).unwrap();
        let back = float_from_bytes(&bytes).unwrap();
        assert_eq!(back.flatten(), m.flatten());
        assert_eq!(to_bytes(&float_engine(&back)).unwrap(), bytes);
        assert_eq!(&bytes[..8], MAGIC);
    }

    #[test]
    fn quantized_round_trip_is_byte_identical() {
        let m = FloatModel::random(tiny_config(5, 3), 2).unwrap();
        for scheme in [Scheme::Sym, Scheme::Asym] {
            let q = quantize_model(&m, scheme).unwrap();
            let bytes = to_bytes(&q).unwrap();
            let back = from_bytes(&bytes).unwrap();
            assert_eq!(to_bytes(&back).unwrap(), bytes);
            let (header, _) = read_header(&bytes).unwrap();
            let want = if scheme == Scheme::Sym { DType::Int8Sym } else { DType::Int8Asym };
            assert!(header.tensors.iter().filter(|e| e.shape.len() == 2).all(|e| e.dtype == want));
            assert!(float_from_bytes(&bytes).is_err());
        }
    }

    #[test]
    fn rejects_bad_input() {
        let m = FloatModel::random(tiny_config(5, 3), 3).unwrap();
        let mut bytes = to_bytes(&float_engine(&m)).unwrap();
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        bytes.push(0);
        assert!(matches!(from_bytes(&bytes), Err(Error::Format(_))));
        bytes.pop();
        bytes[8] = 2;
        assert!(matches!(from_bytes(&bytes), Err(Error::Version(2))));
        bytes[0] = b'X';
        assert!(matches!(from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn int8_payload_is_about_a_quarter() {
        let m = FloatModel::random(tiny_config(5, 3), 4).unwrap();
        let f = to_bytes(&float_engine(&m)).unwrap();
        let q = to_bytes(&quantize_model(&m, Scheme::Sym).unwrap()).unwrap();
        let (fm, _) = payload_sizes(&read_header(&f).unwrap().0);
        let (qm, _) = payload_sizes(&read_header(&q).unwrap().0);
        assert_eq!(qm * 4, fm);
    }
}
