//! Model and quantized-model containers.
//!
//! A container is a directory holding `manifest.json` (graph topology, node
//! attributes, and a tensor table) plus raw little-endian blobs. Float
//! tensors live in `tensors.bin` as 32-bit IEEE-754 values; quantized
//! weights live in `codes.bin`, one byte per code for `n <= 8` and two bytes
//! otherwise.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use dfpq::calibration::BiasMode;
use dfpq::engine::{AccumulatorReport, EngineConfig, EngineError, ExecutionPlan, QuantizedModel, QuantizedWeights};
use dfpq::graph::{Convolution, Graph, GraphError, InnerProduct, Node, Op, Pool};
use dfpq::format::scale_from_threshold;
use dfpq::{dequantize_tensor, FloatFormat, FormatError, QTensor, Scale, Tensor};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MANIFEST: &str = "manifest.json";
pub const TENSORS: &str = "tensors.bin";
pub const CODES: &str = "codes.bin";

const MODEL_KIND: &str = "dfpq-model";
const QUANTIZED_KIND: &str = "dfpq-quantized";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("{}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("malformed manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error("expected a `{expected}` container, found `{found}`")]
    Kind { expected: &'static str, found: String },
    #[error("unsupported container version {0}")]
    Version(u32),
    #[error("tensor `{name}` lies outside the blob ({offset} + {length} > {size})")]
    OutOfBounds { name: String, offset: u64, length: u64, size: u64 },
    #[error("tensor `{name}`: shape {shape:?} needs {expected} bytes, the table says {length}")]
    Length { name: String, shape: Vec<usize>, expected: u64, length: u64 },
    #[error("tensor `{0}` is listed twice")]
    Duplicate(String),
    #[error("unknown tensor `{0}`")]
    Missing(String),
    #[error("tensor `{name}` has dtype {found:?}, expected {expected:?}")]
    Dtype { name: String, expected: Dtype, found: Dtype },
    #[error("code {code} of `{name}` does not fit a {n}-bit format")]
    Code { name: String, code: u16, n: u32 },
    #[error("weights of `{0}`: stored scales disagree with the thresholds")]
    ScaleMismatch(String),
    #[error("weights of `{0}` have no matching node")]
    OrphanWeights(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>, ContainerError> {
    fs::read(path).map_err(|source| ContainerError::Io { path: path.to_path_buf(), source })
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), ContainerError> {
    fs::write(path, bytes).map_err(|source| ContainerError::Io { path: path.to_path_buf(), source })
}

pub(crate) fn create_dir(path: &Path) -> Result<(), ContainerError> {
    fs::create_dir_all(path).map_err(|source| ContainerError::Io { path: path.to_path_buf(), source })
}

pub(crate) fn check_header(kind: &str, expected: &'static str, version: u32) -> Result<(), ContainerError> {
    if kind != expected {
        return Err(ContainerError::Kind { expected, found: kind.to_string() });
    }
    if version != VERSION {
        return Err(ContainerError::Version(version));
    }
    Ok(())
}

pub(crate) fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut text = serde_json::to_vec_pretty(value).expect("manifest types serialize");
    text.push(b'\n');
    text
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    U8,
    U16,
}

impl Dtype {
    pub fn size(self) -> u64 {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
            Dtype::U16 => 2,
        }
    }

    /// Storage type of codes of an `n`-bit format.
    pub fn for_codes(n: u32) -> Dtype {
        if n <= 8 {
            Dtype::U8
        } else {
            Dtype::U16
        }
    }
}

/// One entry of a tensor table: `length` bytes at `offset` of the blob.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

/// A tensor table plus the blob it indexes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Blob {
    pub table: Vec<TensorEntry>,
    pub bytes: Vec<u8>,
}

impl Blob {
    fn push(&mut self, name: &str, dtype: Dtype, shape: &[usize], data: impl IntoIterator<Item = u8>) -> String {
        let offset = self.bytes.len() as u64;
        self.bytes.extend(data);
        let length = self.bytes.len() as u64 - offset;
        self.table.push(TensorEntry { name: name.to_string(), dtype, shape: shape.to_vec(), offset, length });
        name.to_string()
    }

    pub fn push_f32(&mut self, name: &str, shape: &[usize], data: &[f32]) -> String {
        self.push(name, Dtype::F32, shape, data.iter().flat_map(|v| v.to_le_bytes()))
    }

    pub fn push_codes(&mut self, name: &str, shape: &[usize], codes: &[u16], n: u32) -> String {
        match Dtype::for_codes(n) {
            Dtype::U8 => self.push(name, Dtype::U8, shape, codes.iter().map(|&c| c as u8)),
            _ => self.push(name, Dtype::U16, shape, codes.iter().flat_map(|c| c.to_le_bytes())),
        }
    }

    /// Checks every entry against the blob and indexes them by name.
    pub fn validate(&self) -> Result<HashMap<&str, &TensorEntry>, ContainerError> {
        let size = self.bytes.len() as u64;
        let mut index = HashMap::new();
        for e in &self.table {
            let expected = e.shape.iter().product::<usize>() as u64 * e.dtype.size();
            if e.length != expected {
                return Err(ContainerError::Length { name: e.name.clone(), shape: e.shape.clone(), expected, length: e.length });
            }
            if e.offset.checked_add(e.length).is_none_or(|end| end > size) {
                return Err(ContainerError::OutOfBounds { name: e.name.clone(), offset: e.offset, length: e.length, size });
            }
            if index.insert(e.name.as_str(), e).is_some() {
                return Err(ContainerError::Duplicate(e.name.clone()));
            }
        }
        Ok(index)
    }

    fn entry(&self, name: &str, dtypes: &[Dtype]) -> Result<(&TensorEntry, &[u8]), ContainerError> {
        let e = self.table.iter().find(|e| e.name == name).ok_or_else(|| ContainerError::Missing(name.to_string()))?;
        if !dtypes.contains(&e.dtype) {
            return Err(ContainerError::Dtype { name: name.to_string(), expected: dtypes[0], found: e.dtype });
        }
        let range = e.offset as usize..(e.offset + e.length) as usize;
        let bytes = self.bytes.get(range).ok_or_else(|| ContainerError::OutOfBounds {
            name: name.to_string(),
            offset: e.offset,
            length: e.length,
            size: self.bytes.len() as u64,
        })?;
        Ok((e, bytes))
    }

    pub fn f32_tensor(&self, name: &str) -> Result<Tensor, ContainerError> {
        let (e, bytes) = self.entry(name, &[Dtype::F32])?;
        let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        Ok(Tensor::new(e.shape.clone(), data))
    }

    /// Codes and shape of a code tensor.
    pub fn codes(&self, name: &str) -> Result<(Vec<usize>, Vec<u16>), ContainerError> {
        let (e, bytes) = self.entry(name, &[Dtype::U8, Dtype::U16])?;
        let codes = match e.dtype {
            Dtype::U8 => bytes.iter().map(|&b| b as u16).collect(),
            _ => bytes.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect(),
        };
        Ok((e.shape.clone(), codes))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub global: bool,
}

impl From<Pool> for PoolEntry {
    fn from(p: Pool) -> Self {
        PoolEntry { kernel: p.kernel, stride: p.stride, pad: p.pad, global: p.global }
    }
}

impl From<PoolEntry> for Pool {
    fn from(p: PoolEntry) -> Self {
        Pool { kernel: p.kernel, stride: p.stride, pad: p.pad, global: p.global }
    }
}

/// Layer kind and attributes; parameters are tensor-table names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum OpEntry {
    Input {
        shape: Vec<usize>,
    },
    Output,
    Convolution {
        weight: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<String>,
        stride: usize,
        pad: usize,
        groups: usize,
    },
    InnerProduct {
        weight: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<String>,
    },
    BatchNorm {
        mean: String,
        variance: String,
        epsilon: f32,
    },
    Scale {
        factors: String,
    },
    Bias {
        values: String,
    },
    ReLU,
    EltwiseAdd,
    Concat {
        axis: usize,
    },
    MaxPool(PoolEntry),
    AvgPool(PoolEntry),
    IdentityDownscale {
        factor: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeEntry {
    pub id: String,
    pub op: OpEntry,
    pub inputs: Vec<String>,
    #[serde(default)]
    pub outputs: Vec<String>,
}

/// Where convolution and inner-product weights are stored.
enum WeightStore<'a> {
    Float,
    Codes(&'a BTreeMap<String, QuantizedWeights>),
}

fn encode_graph(graph: &Graph, floats: &mut Blob, codes: &mut Blob, store: WeightStore) -> Vec<NodeEntry> {
    let mut nodes = Vec::with_capacity(graph.nodes.len());
    for node in &graph.nodes {
        let id = &node.id;
        let op = match &node.op {
            Op::Input { shape } => OpEntry::Input { shape: shape.clone() },
            Op::Output => OpEntry::Output,
            Op::Convolution(c) => {
                let weight = push_weight(id, &c.weight, floats, codes, &store);
                let bias = push_bias(floats, id, &c.bias);
                OpEntry::Convolution { weight, bias, stride: c.stride, pad: c.pad, groups: c.groups }
            }
            Op::InnerProduct(ip) => {
                let weight = push_weight(id, &ip.weight, floats, codes, &store);
                let bias = push_bias(floats, id, &ip.bias);
                OpEntry::InnerProduct { weight, bias }
            }
            Op::BatchNorm { mean, variance, epsilon } => {
                let mean = push_vector(floats, id, "mean", mean);
                OpEntry::BatchNorm { mean, variance: push_vector(floats, id, "variance", variance), epsilon: *epsilon }
            }
            Op::Scale { factors } => OpEntry::Scale { factors: push_vector(floats, id, "factors", factors) },
            Op::Bias { values } => OpEntry::Bias { values: push_vector(floats, id, "values", values) },
            Op::ReLU => OpEntry::ReLU,
            Op::EltwiseAdd => OpEntry::EltwiseAdd,
            Op::Concat { axis } => OpEntry::Concat { axis: *axis },
            Op::MaxPool(p) => OpEntry::MaxPool((*p).into()),
            Op::AvgPool(p) => OpEntry::AvgPool((*p).into()),
            Op::IdentityDownscale { factor } => OpEntry::IdentityDownscale { factor: *factor },
        };
        nodes.push(NodeEntry { id: id.clone(), op, inputs: node.inputs.clone(), outputs: node.outputs.clone() });
    }
    nodes
}

fn push_vector(floats: &mut Blob, id: &str, suffix: &str, v: &[f32]) -> String {
    floats.push_f32(&format!("{id}.{suffix}"), &[v.len()], v)
}

fn push_bias(floats: &mut Blob, id: &str, bias: &[f32]) -> Option<String> {
    (!bias.is_empty()).then(|| push_vector(floats, id, "bias", bias))
}

fn push_weight(id: &str, weight: &Tensor, floats: &mut Blob, codes: &mut Blob, store: &WeightStore) -> String {
    let name = format!("{id}.weight");
    match store {
        WeightStore::Float => floats.push_f32(&name, &weight.shape, &weight.data),
        WeightStore::Codes(weights) => {
            let q = &weights[id].codes;
            codes.push_codes(&name, &q.shape, &q.codes, q.format.bits())
        }
    }
}

fn decode_graph(nodes: &[NodeEntry], tensor: &dyn Fn(&str) -> Result<Tensor, ContainerError>) -> Result<Graph, ContainerError> {
    let vector = |name: &str| tensor(name).map(|t| t.data);
    let bias = |name: &Option<String>| name.as_deref().map(vector).transpose().map(Option::unwrap_or_default);
    let mut out = Vec::with_capacity(nodes.len());
    for entry in nodes {
        let op = match &entry.op {
            OpEntry::Input { shape } => Op::Input { shape: shape.clone() },
            OpEntry::Output => Op::Output,
            OpEntry::Convolution { weight, bias: b, stride, pad, groups } => {
                Op::Convolution(Convolution { weight: tensor(weight)?, bias: bias(b)?, stride: *stride, pad: *pad, groups: *groups })
            }
            OpEntry::InnerProduct { weight, bias: b } => Op::InnerProduct(InnerProduct { weight: tensor(weight)?, bias: bias(b)? }),
            OpEntry::BatchNorm { mean, variance, epsilon } => {
                Op::BatchNorm { mean: vector(mean)?, variance: vector(variance)?, epsilon: *epsilon }
            }
            OpEntry::Scale { factors } => Op::Scale { factors: vector(factors)? },
            OpEntry::Bias { values } => Op::Bias { values: vector(values)? },
            OpEntry::ReLU => Op::ReLU,
            OpEntry::EltwiseAdd => Op::EltwiseAdd,
            OpEntry::Concat { axis } => Op::Concat { axis: *axis },
            OpEntry::MaxPool(p) => Op::MaxPool((*p).into()),
            OpEntry::AvgPool(p) => Op::AvgPool((*p).into()),
            OpEntry::IdentityDownscale { factor } => Op::IdentityDownscale { factor: *factor },
        };
        out.push(Node { id: entry.id.clone(), op, inputs: entry.inputs.clone(), outputs: entry.outputs.clone() });
    }
    let graph = Graph::new(out);
    graph.validate()?;
    Ok(graph)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub container: String,
    pub version: u32,
    pub nodes: Vec<NodeEntry>,
    pub tensors: Vec<TensorEntry>,
}

/// A float network on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelContainer {
    pub nodes: Vec<NodeEntry>,
    pub tensors: Blob,
}

impl ModelContainer {
    pub fn from_graph(graph: &Graph) -> Self {
        let mut tensors = Blob::default();
        let nodes = encode_graph(graph, &mut tensors, &mut Blob::default(), WeightStore::Float);
        ModelContainer { nodes, tensors }
    }

    pub fn graph(&self) -> Result<Graph, ContainerError> {
        self.tensors.validate()?;
        decode_graph(&self.nodes, &|name| self.tensors.f32_tensor(name))
    }

    pub fn manifest(&self) -> ModelManifest {
        ModelManifest {
            container: MODEL_KIND.into(),
            version: VERSION,
            nodes: self.nodes.clone(),
            tensors: self.tensors.table.clone(),
        }
    }

    pub fn from_parts(manifest: &[u8], blob: Vec<u8>) -> Result<Self, ContainerError> {
        let m: ModelManifest = serde_json::from_slice(manifest)?;
        check_header(&m.container, MODEL_KIND, m.version)?;
        let tensors = Blob { table: m.tensors, bytes: blob };
        tensors.validate()?;
        Ok(ModelContainer { nodes: m.nodes, tensors })
    }

    pub fn write(&self, dir: &Path) -> Result<(), ContainerError> {
        create_dir(dir)?;
        write_file(&dir.join(MANIFEST), &to_json(&self.manifest()))?;
        write_file(&dir.join(TENSORS), &self.tensors.bytes)
    }

    pub fn read(dir: &Path) -> Result<Self, ContainerError> {
        Self::from_parts(&read_file(&dir.join(MANIFEST))?, read_file(&dir.join(TENSORS))?)
    }
}

pub fn save_model(graph: &Graph, dir: &Path) -> Result<(), ContainerError> {
    ModelContainer::from_graph(graph).write(dir)
}

pub fn load_model(dir: &Path) -> Result<Graph, ContainerError> {
    ModelContainer::read(dir)?.graph()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationEntry {
    pub tensor: String,
    pub gamma: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightEntry {
    pub node: String,
    pub codes: String,
    /// Per-output-channel thresholds.
    pub gamma: Vec<f64>,
    pub alpha: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub degenerate: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorEntry {
    pub node: String,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedManifest {
    pub container: String,
    pub version: u32,
    pub activation_format: FloatFormat,
    pub weight_format: FloatFormat,
    pub bias_mode: BiasMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accumulator_bits: Option<u32>,
    pub nodes: Vec<NodeEntry>,
    pub activations: Vec<ActivationEntry>,
    pub weights: Vec<WeightEntry>,
    pub downscale_factors: Vec<FactorEntry>,
    pub accumulators: Vec<AccumulatorReport>,
    pub tensors: Vec<TensorEntry>,
    pub codes: Vec<TensorEntry>,
}

/// A calibrated network on disk. Convolution and inner-product weights are
/// stored only as codes; the float graph read back carries their
/// dequantized values.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedContainer {
    pub manifest: QuantizedManifest,
    pub tensors: Blob,
    pub codes: Blob,
}

impl QuantizedContainer {
    /// Builds the container, sizing every accumulator under `config`.
    pub fn from_model(model: &QuantizedModel, config: &EngineConfig) -> Result<Self, ContainerError> {
        let plan = ExecutionPlan::new(model, config)?;
        let accumulators = plan.accumulator_reports().into_iter().cloned().collect();
        let mut tensors = Blob::default();
        let mut codes = Blob::default();
        let nodes = encode_graph(&model.graph, &mut tensors, &mut codes, WeightStore::Codes(&model.weights));
        let activations = model
            .thresholds
            .iter()
            .map(|(t, &gamma)| Ok(ActivationEntry { tensor: t.clone(), gamma, alpha: scale_from_threshold(gamma, &model.activation_format)? }))
            .collect::<Result<_, FormatError>>()?;
        let weights = model
            .weights
            .iter()
            .map(|(node, w)| WeightEntry {
                node: node.clone(),
                codes: format!("{node}.weight"),
                gamma: w.gamma.clone(),
                alpha: match &w.codes.scale {
                    Scale::PerChannel(a) => a.clone(),
                    Scale::PerTensor(a) => vec![*a],
                },
                degenerate: w.degenerate.clone(),
            })
            .collect();
        let downscale_factors = model
            .graph
            .nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::IdentityDownscale { factor } => Some(FactorEntry { node: n.id.clone(), factor }),
                _ => None,
            })
            .collect();
        let manifest = QuantizedManifest {
            container: QUANTIZED_KIND.into(),
            version: VERSION,
            activation_format: model.activation_format,
            weight_format: model.weight_format,
            bias_mode: model.bias_mode,
            accumulator_bits: config.accumulator_bits,
            nodes,
            activations,
            weights,
            downscale_factors,
            accumulators,
            tensors: tensors.table.clone(),
            codes: codes.table.clone(),
        };
        Ok(QuantizedContainer { manifest, tensors, codes })
    }

    /// Engine settings recorded at calibration time.
    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig { accumulator_bits: self.manifest.accumulator_bits, bias_mode: self.manifest.bias_mode }
    }

    pub fn model(&self) -> Result<QuantizedModel, ContainerError> {
        let m = &self.manifest;
        self.tensors.validate()?;
        self.codes.validate()?;
        let mut weights = BTreeMap::new();
        for w in &m.weights {
            let (shape, codes) = self.codes.codes(&w.codes)?;
            if let Some(&code) = codes.iter().find(|&&c| c as usize >= m.weight_format.code_count()) {
                return Err(ContainerError::Code { name: w.codes.clone(), code, n: m.weight_format.bits() });
            }
            let alpha = w.gamma.iter().map(|g| scale_from_threshold(*g, &m.weight_format)).collect::<Result<Vec<_>, _>>()?;
            if alpha != w.alpha || shape.first() != Some(&alpha.len()) {
                return Err(ContainerError::ScaleMismatch(w.node.clone()));
            }
            let q = QTensor { shape, codes, format: m.weight_format, scale: Scale::PerChannel(alpha) };
            weights.insert(w.node.clone(), QuantizedWeights { codes: q, gamma: w.gamma.clone(), degenerate: w.degenerate.clone() });
        }
        let graph = decode_graph(&m.nodes, &|name| match m.weights.iter().find(|w| w.codes == name) {
            Some(w) => Ok(dequantize_tensor(&weights[&w.node].codes)),
            None => self.tensors.f32_tensor(name),
        })?;
        if let Some(w) = m.weights.iter().find(|w| graph.node(&w.node).is_none()) {
            return Err(ContainerError::OrphanWeights(w.node.clone()));
        }
        let thresholds = m.activations.iter().map(|a| (a.tensor.clone(), a.gamma)).collect();
        Ok(QuantizedModel {
            graph,
            activation_format: m.activation_format,
            weight_format: m.weight_format,
            bias_mode: m.bias_mode,
            thresholds,
            weights,
        })
    }

    pub fn from_parts(manifest: &[u8], tensors: Vec<u8>, codes: Vec<u8>) -> Result<Self, ContainerError> {
        let m: QuantizedManifest = serde_json::from_slice(manifest)?;
        check_header(&m.container, QUANTIZED_KIND, m.version)?;
        let tensors = Blob { table: m.tensors.clone(), bytes: tensors };
        let codes = Blob { table: m.codes.clone(), bytes: codes };
        tensors.validate()?;
        codes.validate()?;
        Ok(QuantizedContainer { manifest: m, tensors, codes })
    }

    pub fn manifest_bytes(&self) -> Vec<u8> {
        to_json(&self.manifest)
    }

    pub fn write(&self, dir: &Path) -> Result<(), ContainerError> {
        create_dir(dir)?;
        write_file(&dir.join(MANIFEST), &self.manifest_bytes())?;
        write_file(&dir.join(TENSORS), &self.tensors.bytes)?;
        write_file(&dir.join(CODES), &self.codes.bytes)
    }

    pub fn read(dir: &Path) -> Result<Self, ContainerError> {
        Self::from_parts(&read_file(&dir.join(MANIFEST))?, read_file(&dir.join(TENSORS))?, read_file(&dir.join(CODES))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_graph() -> Graph {
        let w = Tensor::new(vec![2, 1, 3, 3], (0..18).map(|i| (i as f32 - 9.0) / 7.0).collect());
        Graph::new(vec![
            Node::new("in", Op::Input { shape: vec![1, 5, 5] }, &[], &["x"]),
            Node::new("conv", Op::Convolution(Convolution { weight: w, bias: vec![0.1, -0.2], stride: 1, pad: 1, groups: 1 }), &["x"], &["c"]),
            Node::new("bn", Op::BatchNorm { mean: vec![0.5, -0.5], variance: vec![2.0, 0.25], epsilon: 1e-5 }, &["c"], &["b"]),
            Node::new("relu", Op::ReLU, &["b"], &["r"]),
            Node::new("pool", Op::MaxPool(Pool::window(2, 2, 0)), &["r"], &["p"]),
            Node::new("out", Op::Output, &["p"], &[]),
        ])
    }

    #[test]
    fn model_round_trip() {
        let g = tiny_graph();
        let c = ModelContainer::from_graph(&g);
        assert_eq!(c.graph().unwrap(), g);
        let json = to_json(&c.manifest());
        let back = ModelContainer::from_parts(&json, c.tensors.bytes.clone()).unwrap();
        assert_eq!(back, c);
        assert_eq!(to_json(&back.manifest()), json);
    }

    #[test]
    fn code_packing() {
        let mut b = Blob::default();
        b.push_codes("a", &[3], &[0, 200, 255], 8);
        b.push_codes("b", &[2], &[1, 0x1234], 12);
        assert_eq!(b.bytes, vec![0, 200, 255, 1, 0, 0x34, 0x12]);
        assert_eq!(b.codes("a").unwrap().1, vec![0, 200, 255]);
        assert_eq!(b.codes("b").unwrap(), (vec![2], vec![1, 0x1234]));
    }

    #[test]
    fn malformed_tables_are_rejected() {
        let mut b = Blob::default();
        b.push_f32("w", &[2], &[1.0, 2.0]);
        let mut bad = b.clone();
        bad.table[0].offset = 4;
        assert!(matches!(bad.validate(), Err(ContainerError::OutOfBounds { .. })));
        let mut bad = b.clone();
        bad.table[0].shape = vec![3];
        assert!(matches!(bad.validate(), Err(ContainerError::Length { .. })));
        let mut bad = b.clone();
        bad.table.push(bad.table[0].clone());
        assert!(matches!(bad.validate(), Err(ContainerError::Duplicate(_))));
        assert!(matches!(b.codes("w"), Err(ContainerError::Dtype { .. })));
        assert!(matches!(b.f32_tensor("v"), Err(ContainerError::Missing(_))));
        let json = br#"{"container": "dfpq-quantized", "version": 1, "nodes": [], "tensors": []}"#;
        assert!(matches!(ModelContainer::from_parts(json, vec![]), Err(ContainerError::Kind { .. })));
        assert!(matches!(ModelContainer::from_parts(b"{", vec![]), Err(ContainerError::Json(_))));
    }
}
