//! Bootstrap calibration of a whole network.
//!
//! Tensors linked by ReLU, max pooling, concat, and eltwise addition must
//! share one scale, so they form a scale group. Groups are calibrated in
//! dependency order: each group's real values are computed from the already
//! quantized outputs of earlier groups, its threshold is swept on the pooled
//! values of its sink tensors, and its codes are then produced for the next
//! groups.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::Serialize;

use super::{activation_threshold, weight_thresholds, ActivationThreshold, CalibrationError};
use crate::engine::{eval_float_node, prepare_kernel, run_kernel, EngineConfig, NodeKernel, QuantizedModel, QuantizedWeights};
pub use crate::engine::BiasMode;
use crate::format::{scale_from_threshold, FloatFormat};
use crate::graph::{assign_downscale_factors, infer_shapes, preprocess, splice_out_unity, Graph, Op, TensorId};
use crate::quantize::{dequantize_tensor, quantize_tensor, QTensor, Threshold};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationConfig {
    pub activation_format: FloatFormat,
    pub weight_format: FloatFormat,
    pub activation_threshold: ActivationThreshold,
    pub bias_mode: BiasMode,
    /// Accumulator limit enforced while calibrating (see [`EngineConfig`]).
    pub accumulator_bits: Option<u32>,
}

impl CalibrationConfig {
    /// One format for activations and weights, default sweep.
    pub fn new(format: FloatFormat) -> Self {
        CalibrationConfig {
            activation_format: format,
            weight_format: format,
            activation_threshold: ActivationThreshold::default(),
            bias_mode: BiasMode::default(),
            accumulator_bits: None,
        }
    }

    fn engine(&self) -> EngineConfig {
        EngineConfig { accumulator_bits: self.accumulator_bits, bias_mode: self.bias_mode }
    }
}

/// Threshold chosen for one tensor.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationRecord {
    pub tensor_id: TensorId,
    /// One value for activations, one per output channel for weights.
    pub gamma: Vec<f64>,
    /// Distance score of the sweep (swept activations only).
    pub delta: Option<f64>,
    /// Winning sweep candidate; its edge is below `gamma` when the group
    /// threshold was widened to cover a downscaled branch.
    pub candidate: Option<usize>,
    pub format: FloatFormat,
    /// All-zero data: `gamma` is a placeholder of 1.
    pub degenerate: bool,
}

/// Everything calibration produces.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkCalibration {
    /// Activation records (group sinks and join inputs) and weight records
    /// (`<node>.weight`).
    pub records: BTreeMap<TensorId, CalibrationRecord>,
    /// Threshold of every activation tensor.
    pub thresholds: BTreeMap<TensorId, f64>,
    pub weights: BTreeMap<String, QuantizedWeights>,
}

impl NetworkCalibration {
    pub fn into_model(self, graph: Graph, config: &CalibrationConfig) -> QuantizedModel {
        QuantizedModel {
            graph,
            activation_format: config.activation_format,
            weight_format: config.weight_format,
            bias_mode: config.bias_mode,
            thresholds: self.thresholds,
            weights: self.weights,
        }
    }
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

fn union(parent: &mut [usize], a: usize, b: usize) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        parent[ra.max(rb)] = ra.min(rb);
    }
}

/// Quantizes per-output-channel weights of every convolution and inner product.
fn quantize_weights(
    graph: &Graph,
    format: FloatFormat,
    records: &mut BTreeMap<TensorId, CalibrationRecord>,
) -> Result<BTreeMap<String, QuantizedWeights>, CalibrationError> {
    let mut out = BTreeMap::new();
    for node in &graph.nodes {
        let w = match &node.op {
            Op::Convolution(c) => &c.weight,
            Op::InnerProduct(ip) => &ip.weight,
            _ => continue,
        };
        if w.data.iter().any(|v| !v.is_finite()) {
            return Err(CalibrationError::NonFinite);
        }
        let (gamma, degenerate) = weight_thresholds(w);
        let codes = quantize_tensor(w, &Threshold::PerChannel(gamma.clone()), format)?;
        let id = format!("{}.weight", node.id);
        records.insert(
            id.clone(),
            CalibrationRecord {
                tensor_id: id,
                gamma: gamma.clone(),
                delta: None,
                candidate: None,
                format,
                degenerate: !degenerate.is_empty(),
            },
        );
        out.insert(node.id.clone(), QuantizedWeights { codes, gamma, degenerate });
    }
    Ok(out)
}

/// Calibrates a preprocessed graph on `batch`.
pub fn calibrate_network(graph: &Graph, batch: &[Tensor], config: &CalibrationConfig) -> Result<NetworkCalibration, CalibrationError> {
    if batch.is_empty() {
        return Err(CalibrationError::EmptyBatch);
    }
    let expected = graph.input_shape()?;
    if let Some(bad) = batch.iter().find(|x| x.shape != expected) {
        return Err(CalibrationError::BatchShape { expected, got: bad.shape.clone() });
    }
    let order = graph.topological_order()?;
    let shapes = infer_shapes(graph)?;
    let consumers = graph.consumers();
    let engine = config.engine();
    let act = config.activation_format;

    let mut records = BTreeMap::new();
    let weights = quantize_weights(graph, config.weight_format, &mut records)?;

    // scale groups over tensors, numbered in execution order
    let tensors: Vec<&str> = order.iter().filter_map(|&i| graph.nodes[i].outputs.first().map(|t| t.as_str())).collect();
    let index: HashMap<&str, usize> = tensors.iter().enumerate().map(|(i, t)| (*t, i)).collect();
    let mut parent: Vec<usize> = (0..tensors.len()).collect();
    for &i in &order {
        let node = &graph.nodes[i];
        match node.op {
            Op::ReLU | Op::MaxPool(_) | Op::Concat { .. } | Op::EltwiseAdd => {
                let out = index[node.output()];
                for t in &node.inputs {
                    union(&mut parent, out, index[t.as_str()]);
                }
            }
            Op::BatchNorm { .. } | Op::Scale { .. } | Op::Bias { .. } => {
                return Err(CalibrationError::Unthresholdable { node: node.id.clone(), kind: node.op.kind() })
            }
            _ => {}
        }
    }
    let root: Vec<usize> = (0..tensors.len()).map(|i| find(&mut parent, i)).collect();
    let mut group_of: Vec<usize> = vec![usize::MAX; tensors.len()];
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut numbering: HashMap<usize, usize> = HashMap::new();
    for (i, &r) in root.iter().enumerate() {
        let g = *numbering.entry(r).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        group_of[i] = g;
        groups[g].push(i);
    }
    let tensor_group = |t: &str| group_of[index[t]];

    // dependencies run from a source node's input group to its output group
    let mut deps: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); groups.len()];
    for &i in &order {
        let node = &graph.nodes[i];
        if matches!(node.op, Op::Output | Op::Input { .. }) {
            continue;
        }
        let g = tensor_group(node.output());
        for t in &node.inputs {
            let h = tensor_group(t);
            if h == g && !matches!(node.op, Op::ReLU | Op::MaxPool(_) | Op::Concat { .. } | Op::EltwiseAdd) {
                return Err(CalibrationError::ScaleCycle(node.id.clone()));
            }
            if h != g {
                deps[g].insert(h);
            }
        }
    }
    let group_order = order_groups(&deps).ok_or_else(|| CalibrationError::ScaleCycle(tensors[groups[0][0]].to_string()))?;

    let mut alphas: HashMap<TensorId, f64> = HashMap::new();
    let mut thresholds: BTreeMap<TensorId, f64> = BTreeMap::new();
    // codes per image, per tensor
    let mut codes: Vec<HashMap<TensorId, QTensor>> = vec![HashMap::new(); batch.len()];

    for g in group_order {
        let members: BTreeSet<&str> = groups[g].iter().map(|&i| tensors[i]).collect();
        let nodes: Vec<usize> = order
            .iter()
            .copied()
            .filter(|&i| graph.nodes[i].outputs.first().is_some_and(|t| members.contains(t.as_str())))
            .collect();
        let is_source = |i: usize| !matches!(graph.nodes[i].op, Op::ReLU | Op::MaxPool(_) | Op::Concat { .. } | Op::EltwiseAdd);
        let mut kernels: HashMap<usize, NodeKernel> = HashMap::new();
        for &i in &nodes {
            if is_source(i) {
                let node = &graph.nodes[i];
                kernels.insert(i, prepare_kernel(node, weights.get(&node.id), &shapes, &alphas, act, &engine)?);
            }
        }
        let sinks: Vec<&str> = members
            .iter()
            .copied()
            .filter(|t| match consumers.get(t) {
                None => true,
                Some(cs) => cs.iter().any(|&c| {
                    let n = &graph.nodes[c];
                    matches!(n.op, Op::Output) || !members.contains(n.output())
                }),
            })
            .collect();

        // real values from quantized inputs
        let mut pooled: Vec<f64> = Vec::new();
        for (b, image) in batch.iter().enumerate() {
            let mut real: HashMap<&str, Tensor> = HashMap::new();
            for &i in &nodes {
                let node = &graph.nodes[i];
                let out = match (&node.op, kernels.get(&i)) {
                    (Op::Input { .. }, _) => image.clone(),
                    (Op::IdentityDownscale { .. }, _) => dequantize_tensor(&codes[b][&node.inputs[0]]),
                    (_, Some(NodeKernel::Mac(mac))) => {
                        let values = mac.real_outputs(&codes[b][&node.inputs[0]])?;
                        Tensor::new(mac.out_shape(), values.into_iter().map(|v| v as f32).collect())
                    }
                    _ => {
                        let ins: Vec<&Tensor> = node.inputs.iter().map(|t| &real[t.as_str()]).collect();
                        eval_float_node(node, &ins)?
                    }
                };
                real.insert(node.output(), out);
            }
            for t in &sinks {
                pooled.extend(real[t].data.iter().map(|&v| v as f64));
            }
        }

        let (mut gamma, sweep, degenerate) = match activation_threshold(&pooled, &act, &config.activation_threshold) {
            Ok((g, r)) => (g, r, false),
            Err(CalibrationError::Degenerate) => (1.0, None, true),
            Err(e) => return Err(e),
        };
        // a downscaled branch may only shrink its scale on the way in
        for &i in &nodes {
            let node = &graph.nodes[i];
            if matches!(node.op, Op::IdentityDownscale { .. }) {
                gamma = gamma.max(thresholds[&node.inputs[0]]);
            }
        }
        let alpha = scale_from_threshold(gamma, &act)?;
        for t in &members {
            alphas.insert(t.to_string(), alpha);
            thresholds.insert(t.to_string(), gamma);
        }

        // codes for the groups downstream
        for (b, image) in batch.iter().enumerate() {
            for &i in &nodes {
                let node = &graph.nodes[i];
                let out = match &node.op {
                    Op::Input { .. } => quantize_tensor(image, &Threshold::PerTensor(gamma), act)?,
                    _ => {
                        let kernel = match kernels.get(&i) {
                            Some(k) => k.clone(),
                            None => prepare_kernel(node, None, &shapes, &alphas, act, &engine)?,
                        };
                        let ins: Vec<&QTensor> = node.inputs.iter().map(|t| &codes[b][t]).collect();
                        run_kernel(node, &kernel, &ins, alpha)?
                    }
                };
                codes[b].insert(node.output().to_string(), out);
            }
        }

        let join_inputs: BTreeSet<&str> = members
            .iter()
            .copied()
            .filter(|t| consumers.get(t).is_some_and(|cs| cs.iter().any(|&c| graph.nodes[c].op.is_join())))
            .collect();
        for t in sinks.iter().copied().chain(join_inputs) {
            records.insert(
                t.to_string(),
                CalibrationRecord {
                    tensor_id: t.to_string(),
                    gamma: vec![gamma],
                    delta: sweep.as_ref().map(|r| r.delta),
                    candidate: sweep.as_ref().and_then(|r| r.index),
                    format: act,
                    degenerate,
                },
            );
        }
    }

    Ok(NetworkCalibration { records, thresholds, weights })
}

/// Kahn's algorithm over scale groups, smallest group number first.
fn order_groups(deps: &[BTreeSet<usize>]) -> Option<Vec<usize>> {
    let mut pending: Vec<usize> = deps.iter().map(|d| d.len()).collect();
    let mut ready: BTreeSet<usize> = (0..deps.len()).filter(|&g| pending[g] == 0).collect();
    let mut out = Vec::with_capacity(deps.len());
    while let Some(g) = ready.pop_first() {
        out.push(g);
        for (h, d) in deps.iter().enumerate() {
            if d.contains(&g) {
                pending[h] -= 1;
                if pending[h] == 0 {
                    ready.insert(h);
                }
            }
        }
    }
    (out.len() == deps.len()).then_some(out)
}

/// The full offline flow: preprocessing, calibration, downscale factor
/// assignment, and removal of unity downscales.
pub fn quantize_model(graph: &Graph, batch: &[Tensor], config: &CalibrationConfig) -> Result<(QuantizedModel, NetworkCalibration), CalibrationError> {
    let prepared = preprocess(graph)?;
    let calibration = calibrate_network(&prepared, batch, config)?;
    let thresholds: HashMap<TensorId, f64> = calibration.thresholds.iter().map(|(k, v)| (k.clone(), *v)).collect();
    let factored = assign_downscale_factors(&prepared, &thresholds)?;
    let final_graph = splice_out_unity(&factored);
    let live: BTreeSet<&str> = final_graph.nodes.iter().flat_map(|n| n.outputs.iter().map(|t| t.as_str())).collect();
    let mut model = calibration.clone().into_model(final_graph.clone(), config);
    model.thresholds.retain(|t, _| live.contains(t.as_str()));
    Ok((model, calibration))
}
