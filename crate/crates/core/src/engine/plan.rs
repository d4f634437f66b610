use std::collections::{BTreeMap, HashMap};

use super::mac::{AccumulatorReport, PreparedMac, QuantizedWeights};
use super::ops::{quantized_concat, quantized_downscale, quantized_eltwise_add, quantized_max_pool, quantized_relu};
use super::{BiasMode, EngineConfig, EngineError};
use crate::format::{scale_from_threshold, FloatFormat};
use crate::graph::{infer_shapes, Graph, Node, Op, Pool, TensorId};
use crate::quantize::{dequantize_tensor, quantize_tensor, QTensor, Threshold};
use crate::tensor::Tensor;

/// A calibrated network: the graph plus activation thresholds and quantized
/// weights.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub graph: Graph,
    pub activation_format: FloatFormat,
    pub weight_format: FloatFormat,
    pub bias_mode: BiasMode,
    /// `γ` of every activation tensor.
    pub thresholds: BTreeMap<TensorId, f64>,
    /// Quantized weights of every convolution and inner product, by node id.
    pub weights: BTreeMap<String, QuantizedWeights>,
}

impl QuantizedModel {
    pub fn alphas(&self) -> Result<HashMap<TensorId, f64>, EngineError> {
        self.thresholds
            .iter()
            .map(|(t, &g)| Ok((t.clone(), scale_from_threshold(g, &self.activation_format)?)))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub(crate) enum NodeKernel {
    Input,
    Output,
    Mac(Box<PreparedMac>),
    ReLU,
    MaxPool(Pool),
    Concat(usize),
    EltwiseAdd,
    Downscale,
}

/// Binds a node to the scales of its inputs.
pub(crate) fn prepare_kernel(
    node: &Node,
    weights: Option<&QuantizedWeights>,
    shapes: &HashMap<TensorId, Vec<usize>>,
    alphas: &HashMap<TensorId, f64>,
    activation: FloatFormat,
    config: &EngineConfig,
) -> Result<NodeKernel, EngineError> {
    Ok(match &node.op {
        Op::Input { .. } => NodeKernel::Input,
        Op::Output => NodeKernel::Output,
        Op::Convolution(_) | Op::InnerProduct(_) | Op::AvgPool(_) => {
            let input = &node.inputs[0];
            let alpha_x = *alphas.get(input).ok_or_else(|| EngineError::MissingScale(input.clone()))?;
            let shape = shapes.get(input).ok_or_else(|| EngineError::MissingScale(input.clone()))?;
            NodeKernel::Mac(Box::new(PreparedMac::new(node, weights, shape, activation, alpha_x, config)?))
        }
        Op::ReLU => NodeKernel::ReLU,
        Op::MaxPool(pool) => NodeKernel::MaxPool(*pool),
        Op::Concat { axis } => NodeKernel::Concat(*axis),
        Op::EltwiseAdd => NodeKernel::EltwiseAdd,
        Op::IdentityDownscale { .. } => NodeKernel::Downscale,
        Op::BatchNorm { .. } | Op::Scale { .. } | Op::Bias { .. } => {
            return Err(EngineError::Unsupported { node: node.id.clone(), kind: node.op.kind() })
        }
    })
}

/// Runs one prepared non-input node on quantized inputs.
pub(crate) fn run_kernel(node: &Node, kernel: &NodeKernel, inputs: &[&QTensor], alpha_out: f64) -> Result<QTensor, EngineError> {
    let x = || inputs.first().copied().ok_or_else(|| EngineError::Shape { node: node.id.clone(), reason: "missing input".into() });
    match kernel {
        NodeKernel::Input | NodeKernel::Output => Ok(x()?.clone()),
        NodeKernel::Mac(mac) => mac.run(x()?, alpha_out),
        NodeKernel::ReLU => Ok(quantized_relu(x()?)),
        NodeKernel::MaxPool(pool) => quantized_max_pool(&node.id, x()?, pool),
        NodeKernel::Concat(axis) => quantized_concat(&node.id, inputs, *axis, alpha_out),
        NodeKernel::EltwiseAdd => quantized_eltwise_add(&node.id, inputs, alpha_out),
        NodeKernel::Downscale => quantized_downscale(&node.id, x()?, alpha_out),
    }
}

/// A quantized model bound to an engine configuration: node order, scales,
/// and prepared kernels.
#[derive(Debug, Clone)]
pub struct ExecutionPlan {
    graph: Graph,
    activation: FloatFormat,
    order: Vec<usize>,
    kernels: Vec<NodeKernel>,
    alphas: HashMap<TensorId, f64>,
    input_gamma: f64,
}

impl ExecutionPlan {
    /// Rejects nodes whose accumulator would exceed `config.accumulator_bits`.
    pub fn new(model: &QuantizedModel, config: &EngineConfig) -> Result<Self, EngineError> {
        let graph = model.graph.clone();
        let order = graph.topological_order()?;
        let shapes = infer_shapes(&graph)?;
        let alphas = model.alphas()?;
        let config = EngineConfig { bias_mode: model.bias_mode, ..config.clone() };
        let kernels = graph
            .nodes
            .iter()
            .map(|n| prepare_kernel(n, model.weights.get(&n.id), &shapes, &alphas, model.activation_format, &config))
            .collect::<Result<Vec<_>, _>>()?;
        for node in &graph.nodes {
            if let Some(t) = node.outputs.first() {
                if !alphas.contains_key(t) {
                    return Err(EngineError::MissingScale(t.clone()));
                }
            }
        }
        let input = graph.input_node()?.output().to_string();
        let input_gamma = model.thresholds[&input];
        Ok(ExecutionPlan { graph, activation: model.activation_format, order, kernels, alphas, input_gamma })
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn alpha(&self, tensor: &str) -> Option<f64> {
        self.alphas.get(tensor).copied()
    }

    /// Node ids in execution order.
    pub fn order(&self) -> Vec<&str> {
        self.order.iter().map(|&i| self.graph.nodes[i].id.as_str()).collect()
    }

    /// Accumulator sizing of every multiply-accumulate node, in execution order.
    pub fn accumulator_reports(&self) -> Vec<&AccumulatorReport> {
        self.order
            .iter()
            .filter_map(|&i| match &self.kernels[i] {
                NodeKernel::Mac(m) => Some(m.report()),
                _ => None,
            })
            .collect()
    }
}

/// Results of a quantized run.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedRun {
    /// Dequantized network outputs, in `Output` node order.
    pub outputs: Vec<Tensor>,
    /// Codes of every tensor.
    pub tensors: HashMap<TensorId, QTensor>,
}

impl QuantizedRun {
    /// The first network output.
    pub fn logits(&self) -> &Tensor {
        &self.outputs[0]
    }
}

/// Quantizes `input` at its calibrated threshold and runs every node.
pub fn quantized_forward(plan: &ExecutionPlan, input: &Tensor) -> Result<QuantizedRun, EngineError> {
    let expected = plan.graph.input_shape()?;
    if input.shape != expected {
        return Err(EngineError::InputShape { expected, got: input.shape.clone() });
    }
    let mut tensors: HashMap<TensorId, QTensor> = HashMap::new();
    for &i in &plan.order {
        let node = &plan.graph.nodes[i];
        let out = match &plan.kernels[i] {
            NodeKernel::Input => quantize_tensor(input, &Threshold::PerTensor(plan.input_gamma), plan.activation)?,
            NodeKernel::Output => continue,
            kernel => {
                let ins: Vec<&QTensor> = node.inputs.iter().map(|t| &tensors[t]).collect();
                run_kernel(node, kernel, &ins, plan.alphas[node.output()])?
            }
        };
        tensors.insert(node.output().to_string(), out);
    }
    let outputs = plan.graph.output_tensors().into_iter().map(|t| dequantize_tensor(&tensors[t])).collect();
    Ok(QuantizedRun { outputs, tensors })
}
