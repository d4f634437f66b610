//! Float reference execution and exact quantized execution.
//!
//! Quantized convolution and inner product accumulate `Σ β_x·β_w` exactly in
//! integers, add the bias at scale `α_x·α_w`, then rescale the total by
//! `α_x·α_w / α_z` in double precision and round into the output format.

mod kernels;
mod mac;
mod ops;
mod plan;

pub use kernels::{convolve, split_integer, Acc128, Acc64, Accumulate, BucketAcc, ConvGeometry, FloatAcc};
pub use mac::{avgpool_geometry, AccumulatorKind, AccumulatorReport, PreparedMac, QuantizedWeights};
pub use ops::{quantized_concat, quantized_downscale, quantized_eltwise_add, quantized_max_pool, quantized_relu};
pub use plan::{quantized_forward, ExecutionPlan, QuantizedModel, QuantizedRun};
pub(crate) use plan::{prepare_kernel, run_kernel, NodeKernel};

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::accumulator::AccumulatorError;
use crate::format::FormatError;
use crate::graph::{Graph, GraphError, Node, Op, TensorId};
use crate::quantize::{dequantize_tensor, QTensor};
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Accumulator(#[from] AccumulatorError),
    #[error("node `{node}`: {reason}")]
    Shape { node: String, reason: String },
    #[error("node `{node}`: {terms} terms need a {q}-bit accumulator but the limit is {limit} bits ({n_max} terms fit)")]
    AccumulatorTooNarrow { node: String, terms: u64, q: u32, limit: u32, n_max: String },
    #[error("node `{node}`: input scale {input:e} exceeds output scale {output:e}")]
    ScaleOrder { node: String, input: f64, output: f64 },
    #[error("node `{0}`: concat inputs carry different scales")]
    ConcatScaleMismatch(String),
    #[error("node `{0}` has no quantized weights")]
    MissingWeights(String),
    #[error("no scale for tensor `{0}`")]
    MissingScale(String),
    #[error("node `{node}`: {kind} layers cannot run quantized")]
    Unsupported { node: String, kind: &'static str },
    #[error("input shape {got:?} differs from the graph input {expected:?}")]
    InputShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("tensors have different shapes: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
}

/// Where a convolution's bias enters the quantized computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BiasMode {
    /// Rounded at scale `α_x·α_w` and added to the integer accumulator.
    #[default]
    Accumulator,
    /// Quantized at the output scale and added after the rescale.
    Output,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EngineConfig {
    /// Register width every multiply-accumulate must fit; `None` selects a
    /// wide enough exact accumulator per node.
    pub accumulator_bits: Option<u32>,
    pub bias_mode: BiasMode,
}

impl EngineConfig {
    /// A fixed 64-bit signed accumulator.
    pub fn fixed64() -> Self {
        EngineConfig { accumulator_bits: Some(64), ..EngineConfig::default() }
    }
}

/// A tensor in either domain.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorBuffer {
    Float(Tensor),
    Quantized(QTensor),
}

impl TensorBuffer {
    pub fn shape(&self) -> &[usize] {
        match self {
            TensorBuffer::Float(t) => &t.shape,
            TensorBuffer::Quantized(q) => &q.shape,
        }
    }

    pub fn to_float(&self) -> Tensor {
        match self {
            TensorBuffer::Float(t) => t.clone(),
            TensorBuffer::Quantized(q) => dequantize_tensor(q),
        }
    }
}

fn per_channel(x: &Tensor, f: impl Fn(usize, f32) -> f32) -> Tensor {
    let stride = x.channel_stride().max(1);
    let data = x.data.iter().enumerate().map(|(i, &v)| f(i / stride, v)).collect();
    Tensor::new(x.shape.clone(), data)
}

fn node_shape_err(node: &Node, reason: &str) -> EngineError {
    EngineError::Shape { node: node.id.clone(), reason: reason.to_string() }
}

/// Single-precision evaluation of one node.
pub(crate) fn eval_float_node(node: &Node, inputs: &[&Tensor]) -> Result<Tensor, EngineError> {
    let x = || inputs.first().copied().ok_or_else(|| node_shape_err(node, "missing input"));
    Ok(match &node.op {
        Op::Input { .. } | Op::Output | Op::IdentityDownscale { .. } => x()?.clone(),
        Op::Convolution(conv) => {
            let x = x()?;
            if x.shape.len() != 3 {
                return Err(node_shape_err(node, "convolution needs a [C, H, W] input"));
            }
            let (kh, kw) = conv.kernel();
            let g = ConvGeometry {
                in_channels: x.shape[0],
                height: x.shape[1],
                width: x.shape[2],
                out_channels: conv.out_channels(),
                kernel_h: kh,
                kernel_w: kw,
                stride: conv.stride,
                pad: conv.pad,
                groups: conv.groups,
            };
            linear_f32(&g, &x.data, &conv.weight.data, &conv.bias, vec![g.out_channels, g.out_height(), g.out_width()])
        }
        Op::InnerProduct(ip) => {
            let x = x()?;
            let g = ConvGeometry::dense(x.len(), ip.out_channels());
            if ip.weight.len() != g.out_channels * g.in_channels {
                return Err(node_shape_err(node, "inner product weight does not match input size"));
            }
            linear_f32(&g, &x.data, &ip.weight.data, &ip.bias, vec![g.out_channels])
        }
        Op::BatchNorm { mean, variance, epsilon } => per_channel(x()?, |c, v| {
            ((v as f64 - mean[c] as f64) / (variance[c] as f64 + *epsilon as f64).sqrt()) as f32
        }),
        Op::Scale { factors } => per_channel(x()?, |c, v| v * factors[c]),
        Op::Bias { values } => per_channel(x()?, |c, v| v + values[c]),
        Op::ReLU => {
            let x = x()?;
            Tensor::new(x.shape.clone(), x.data.iter().map(|&v| v.max(0.0)).collect())
        }
        Op::EltwiseAdd => {
            let first = x()?;
            let mut out = first.clone();
            for other in &inputs[1..] {
                if other.shape != first.shape {
                    return Err(node_shape_err(node, "eltwise inputs differ in shape"));
                }
                out.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
            }
            out
        }
        Op::Concat { axis } => {
            x()?;
            let shapes: Vec<&[usize]> = inputs.iter().map(|t| t.shape.as_slice()).collect();
            let data: Vec<&[f32]> = inputs.iter().map(|t| t.data.as_slice()).collect();
            let (shape, data) = ops::concat_along(&node.id, &shapes, &data, *axis)?;
            Tensor::new(shape, data)
        }
        Op::MaxPool(pool) => {
            let x = x()?;
            let (shape, picks) = ops::max_pool_indices(&node.id, &x.shape, pool, |i| x.data[i] as f64)?;
            Tensor::new(shape, picks.into_iter().map(|i| x.data[i]).collect())
        }
        Op::AvgPool(pool) => {
            let x = x()?;
            let g = avgpool_geometry(pool, &x.shape).ok_or_else(|| node_shape_err(node, "pooling needs a [C, H, W] input"))?;
            let area = (g.kernel_h * g.kernel_w) as f32;
            let ones = vec![1.0f32; g.out_channels * g.kernel_h * g.kernel_w];
            let mut out = linear_f32(&g, &x.data, &ones, &[], vec![g.out_channels, g.out_height(), g.out_width()]);
            out.data.iter_mut().for_each(|v| *v /= area);
            out
        }
    })
}

fn linear_f32(g: &ConvGeometry, x: &[f32], w: &[f32], bias: &[f32], shape: Vec<usize>) -> Tensor {
    let mut out = vec![0.0f32; g.out_len()];
    convolve(g, x, w, &mut FloatAcc(0.0), |oc, i, acc| {
        out[i] = acc.0 + bias.get(oc).copied().unwrap_or(0.0);
    });
    Tensor::new(shape, out)
}

/// Single-precision execution of every node; returns every tensor by id.
pub fn reference_forward(graph: &Graph, input: &Tensor) -> Result<HashMap<TensorId, Tensor>, EngineError> {
    let expected = graph.input_shape()?;
    if input.shape != expected {
        return Err(EngineError::InputShape { expected, got: input.shape.clone() });
    }
    let order = graph.topological_order()?;
    let mut values: HashMap<TensorId, Tensor> = HashMap::new();
    for i in order {
        let node = &graph.nodes[i];
        let out = match node.op {
            Op::Input { .. } => input.clone(),
            Op::Output => continue,
            _ => {
                let ins: Vec<&Tensor> = node.inputs.iter().map(|t| &values[t]).collect();
                eval_float_node(node, &ins)?
            }
        };
        values.insert(node.outputs[0].clone(), out);
    }
    Ok(values)
}

/// Output tensors of a reference run, in `Output` node order.
pub fn reference_outputs(graph: &Graph, input: &Tensor) -> Result<Vec<Tensor>, EngineError> {
    let values = reference_forward(graph, input)?;
    Ok(graph.output_tensors().into_iter().map(|t| values[t].clone()).collect())
}

/// Agreement between a reference tensor `a` and a candidate `b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CompareReport {
    pub max_abs_err: f64,
    /// `max |a - b| / max |a|`.
    pub max_rel_err: f64,
    pub top1_match: bool,
}

pub fn compare_outputs(a: &Tensor, b: &Tensor) -> Result<CompareReport, EngineError> {
    if a.shape != b.shape {
        return Err(EngineError::ShapeMismatch(a.shape.clone(), b.shape.clone()));
    }
    let max_abs_err = a.data.iter().zip(&b.data).fold(0.0f64, |m, (x, y)| m.max((*x as f64 - *y as f64).abs()));
    let scale = a.data.iter().fold(0.0f64, |m, x| m.max((*x as f64).abs()));
    let max_rel_err = if max_abs_err == 0.0 {
        0.0
    } else if scale == 0.0 {
        f64::INFINITY
    } else {
        max_abs_err / scale
    };
    Ok(CompareReport { max_abs_err, max_rel_err, top1_match: a.argmax() == b.argmax() })
}

#[cfg(test)]
mod tests;
