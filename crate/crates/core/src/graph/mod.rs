//! Network IR: a DAG of named nodes over named tensors.
//!
//! Tensors are single images without a batch axis: `[C, H, W]` for feature
//! maps and `[C]` after an inner product. Every tensor has exactly one
//! producer; `Output` nodes mark the network results.

mod passes;
mod shape;

pub use passes::{
    assign_downscale_factors, fold_linear, merge_fork_join, needs_downscale_splice, preprocess, splice_identity_downscale,
    splice_out_unity,
};
pub use shape::infer_shapes;

use std::collections::{BTreeSet, HashMap};

use thiserror::Error;

use crate::tensor::Tensor;

pub type TensorId = String;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("graph contains a cycle through node `{0}`")]
    Cycle(String),
    #[error("duplicate node id `{0}`")]
    DuplicateNode(String),
    #[error("tensor `{tensor}` has more than one producer (`{first}`, `{second}`)")]
    MultipleProducers { tensor: String, first: String, second: String },
    #[error("tensor `{tensor}` consumed by `{node}` has no producer")]
    MissingProducer { tensor: String, node: String },
    #[error("node `{node}`: {reason}")]
    BadNode { node: String, reason: String },
    #[error("node `{node}`: batchnorm channel {channel} has non-positive variance")]
    ZeroVariance { node: String, channel: usize },
    #[error("node `{node}`: shape mismatch: {reason}")]
    Shape { node: String, reason: String },
    #[error("no threshold for tensor `{0}`")]
    MissingThreshold(String),
    #[error("graph has no input node")]
    NoInput,
}

/// Convolution over `[C, H, W]`, weight `[C_out, C_in / groups, kh, kw]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Convolution {
    pub weight: Tensor,
    pub bias: Vec<f32>,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Convolution {
    pub fn out_channels(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape[2], self.weight.shape[3])
    }

    /// Terms per output element: `C_in / groups × kh × kw`.
    pub fn reduction_size(&self) -> usize {
        self.weight.shape[1..].iter().product()
    }
}

/// Dense layer over the flattened input, weight `[C_out, C_in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerProduct {
    pub weight: Tensor,
    pub bias: Vec<f32>,
}

impl InnerProduct {
    pub fn out_channels(&self) -> usize {
        self.weight.shape[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pool {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// Pool over the whole spatial extent.
    pub global: bool,
}

impl Pool {
    pub fn global() -> Self {
        Pool { kernel: 0, stride: 1, pad: 0, global: true }
    }

    pub fn window(kernel: usize, stride: usize, pad: usize) -> Self {
        Pool { kernel, stride, pad, global: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Input { shape: Vec<usize> },
    Output,
    Convolution(Convolution),
    InnerProduct(InnerProduct),
    /// `(x - mean) / sqrt(variance + epsilon)` per channel.
    BatchNorm { mean: Vec<f32>, variance: Vec<f32>, epsilon: f32 },
    Scale { factors: Vec<f32> },
    Bias { values: Vec<f32> },
    ReLU,
    EltwiseAdd,
    Concat { axis: usize },
    MaxPool(Pool),
    AvgPool(Pool),
    /// Identity on real values; in the quantized domain it rescales codes by
    /// `factor ∈ (0, 1]`.
    IdentityDownscale { factor: f64 },
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input { .. } => "Input",
            Op::Output => "Output",
            Op::Convolution(_) => "Convolution",
            Op::InnerProduct(_) => "InnerProduct",
            Op::BatchNorm { .. } => "BatchNorm",
            Op::Scale { .. } => "Scale",
            Op::Bias { .. } => "Bias",
            Op::ReLU => "ReLU",
            Op::EltwiseAdd => "EltwiseAdd",
            Op::Concat { .. } => "Concat",
            Op::MaxPool(_) => "MaxPool",
            Op::AvgPool(_) => "AvgPool",
            Op::IdentityDownscale { .. } => "IdentityDownscale",
        }
    }

    pub fn is_join(&self) -> bool {
        matches!(self, Op::EltwiseAdd | Op::Concat { .. })
    }

    /// Per-channel affine layers that fold into a convolution or inner product.
    pub fn is_linear(&self) -> bool {
        matches!(self, Op::BatchNorm { .. } | Op::Scale { .. } | Op::Bias { .. })
    }

    /// Nodes that can rescale their output explicitly.
    pub fn is_scalable(&self) -> bool {
        matches!(self, Op::Convolution(_) | Op::InnerProduct(_) | Op::IdentityDownscale { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: String,
    pub op: Op,
    pub inputs: Vec<TensorId>,
    pub outputs: Vec<TensorId>,
}

impl Node {
    pub fn new(id: impl Into<String>, op: Op, inputs: &[&str], outputs: &[&str]) -> Self {
        Node {
            id: id.into(),
            op,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// The single output tensor, for every kind except `Output`.
    pub fn output(&self) -> &str {
        &self.outputs[0]
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Graph {
    pub nodes: Vec<Node>,
}

impl Graph {
    pub fn new(nodes: Vec<Node>) -> Self {
        Graph { nodes }
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn node_mut(&mut self, id: &str) -> Option<&mut Node> {
        self.nodes.iter_mut().find(|n| n.id == id)
    }

    /// Index of the node producing each tensor.
    pub fn producers(&self) -> HashMap<&str, usize> {
        let mut map = HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            for t in &n.outputs {
                map.insert(t.as_str(), i);
            }
        }
        map
    }

    /// Indices of the nodes consuming each tensor, in node order; a node
    /// consuming a tensor twice appears twice.
    pub fn consumers(&self) -> HashMap<&str, Vec<usize>> {
        let mut map: HashMap<&str, Vec<usize>> = HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            for t in &n.inputs {
                map.entry(t.as_str()).or_default().push(i);
            }
        }
        map
    }

    pub fn input_node(&self) -> Result<&Node, GraphError> {
        self.nodes.iter().find(|n| matches!(n.op, Op::Input { .. })).ok_or(GraphError::NoInput)
    }

    pub fn input_shape(&self) -> Result<Vec<usize>, GraphError> {
        match &self.input_node()?.op {
            Op::Input { shape } => Ok(shape.clone()),
            _ => unreachable!(),
        }
    }

    /// Tensors marked by `Output` nodes, in node order.
    pub fn output_tensors(&self) -> Vec<&str> {
        self.nodes.iter().filter(|n| matches!(n.op, Op::Output)).flat_map(|n| n.inputs.iter().map(|s| s.as_str())).collect()
    }

    /// Structural checks: unique ids, one producer per tensor, no dangling inputs.
    pub fn validate(&self) -> Result<(), GraphError> {
        let mut ids = BTreeSet::new();
        let mut producer: HashMap<&str, &str> = HashMap::new();
        for n in &self.nodes {
            if !ids.insert(n.id.as_str()) {
                return Err(GraphError::DuplicateNode(n.id.clone()));
            }
            for t in &n.outputs {
                if let Some(first) = producer.insert(t.as_str(), n.id.as_str()) {
                    return Err(GraphError::MultipleProducers {
                        tensor: t.clone(),
                        first: first.to_string(),
                        second: n.id.clone(),
                    });
                }
            }
        }
        for n in &self.nodes {
            for t in &n.inputs {
                if !producer.contains_key(t.as_str()) {
                    return Err(GraphError::MissingProducer { tensor: t.clone(), node: n.id.clone() });
                }
            }
        }
        Ok(())
    }

    /// Producers before consumers; ready nodes are taken in node-id order.
    pub fn topological_order(&self) -> Result<Vec<usize>, GraphError> {
        self.validate()?;
        let producers = self.producers();
        let mut pending: Vec<usize> = vec![0; self.nodes.len()];
        let mut dependents: Vec<Vec<usize>> = vec![Vec::new(); self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            for t in &n.inputs {
                let p = producers[t.as_str()];
                pending[i] += 1;
                dependents[p].push(i);
            }
        }
        let mut ready: BTreeSet<(&str, usize)> =
            (0..self.nodes.len()).filter(|&i| pending[i] == 0).map(|i| (self.nodes[i].id.as_str(), i)).collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(first) = ready.pop_first() {
            let i = first.1;
            order.push(i);
            for &d in &dependents[i] {
                pending[d] -= 1;
                if pending[d] == 0 {
                    ready.insert((self.nodes[d].id.as_str(), d));
                }
            }
        }
        if order.len() != self.nodes.len() {
            let stuck = (0..self.nodes.len()).find(|i| pending[*i] > 0).unwrap();
            return Err(GraphError::Cycle(self.nodes[stuck].id.clone()));
        }
        Ok(order)
    }

    /// Node ids in topological order.
    pub fn topological_ids(&self) -> Result<Vec<String>, GraphError> {
        Ok(self.topological_order()?.into_iter().map(|i| self.nodes[i].id.clone()).collect())
    }

    /// Generates a node or tensor name not yet in use.
    pub fn fresh_name(&self, base: &str) -> String {
        let taken = |name: &str| self.nodes.iter().any(|n| n.id == name || n.outputs.iter().any(|t| t == name));
        if !taken(base) {
            return base.to_string();
        }
        (1..).map(|k| format!("{base}_{k}")).find(|c| !taken(c)).unwrap()
    }
}
