//! Preprocessing passes. Each takes a graph and returns the rewritten graph;
//! all of them preserve real-valued semantics and are idempotent.

use std::collections::HashMap;

use super::{infer_shapes, Convolution, Graph, GraphError, InnerProduct, Node, Op, TensorId};
use crate::tensor::Tensor;

/// Collapses a concat whose output feeds only another concat along the
/// same axis into that consumer.
pub fn merge_fork_join(graph: &Graph) -> Graph {
    let mut g = graph.clone();
    loop {
        let producers = g.producers();
        let consumers = g.consumers();
        let mut merge: Option<(usize, usize, usize)> = None;
        'search: for (outer, node) in g.nodes.iter().enumerate() {
            let Op::Concat { axis } = node.op else { continue };
            for (slot, t) in node.inputs.iter().enumerate() {
                let Some(&inner) = producers.get(t.as_str()) else { continue };
                let single_use = consumers.get(t.as_str()).is_some_and(|c| c.len() == 1);
                if matches!(g.nodes[inner].op, Op::Concat { axis: a } if a == axis) && single_use {
                    merge = Some((outer, slot, inner));
                    break 'search;
                }
            }
        }
        let Some((outer, slot, inner)) = merge else { return g };
        let inner_inputs = g.nodes[inner].inputs.clone();
        g.nodes[outer].inputs.splice(slot..=slot, inner_inputs);
        g.nodes.remove(inner);
    }
}

/// Per-channel `y = s·x + t` coefficients of an affine layer.
fn affine_of(node: &Node) -> Result<(Vec<f64>, Vec<f64>), GraphError> {
    Ok(match &node.op {
        Op::BatchNorm { mean, variance, epsilon } => {
            let mut s = Vec::with_capacity(mean.len());
            let mut t = Vec::with_capacity(mean.len());
            for (c, (&m, &v)) in mean.iter().zip(variance).enumerate() {
                let denom = v as f64 + *epsilon as f64;
                if denom <= 0.0 || !denom.is_finite() {
                    return Err(GraphError::ZeroVariance { node: node.id.clone(), channel: c });
                }
                let inv = 1.0 / denom.sqrt();
                s.push(inv);
                t.push(-(m as f64) * inv);
            }
            (s, t)
        }
        Op::Scale { factors } => (factors.iter().map(|&f| f as f64).collect(), vec![0.0; factors.len()]),
        Op::Bias { values } => (vec![1.0; values.len()], values.iter().map(|&v| v as f64).collect()),
        _ => unreachable!("not an affine layer"),
    })
}

fn fold_into(weight: &mut Tensor, bias: &mut Vec<f32>, s: &[f64], t: &[f64]) {
    let cout = weight.shape[0];
    let stride = weight.channel_stride();
    if bias.is_empty() {
        *bias = vec![0.0; cout];
    }
    for c in 0..cout {
        for w in &mut weight.data[c * stride..(c + 1) * stride] {
            *w = (*w as f64 * s[c]) as f32;
        }
        bias[c] = (bias[c] as f64 * s[c] + t[c]) as f32;
    }
}

/// Folds batchnorm, scale, and bias layers into the convolution or inner
/// product that produces their input. A layer without such a producer is
/// first replaced by an identity (depthwise 1×1 convolution, or diagonal
/// inner product) carrying its coefficients.
pub fn fold_linear(graph: &Graph) -> Result<Graph, GraphError> {
    let mut g = graph.clone();
    let shapes = infer_shapes(&g)?;
    loop {
        let order = g.topological_order()?;
        let Some(idx) = order.into_iter().find(|&i| g.nodes[i].op.is_linear()) else {
            return Ok(g);
        };
        let node = g.nodes[idx].clone();
        let (s, t) = affine_of(&node)?;
        let input = &node.inputs[0];
        let producers = g.producers();
        let consumers = g.consumers();
        let producer = producers[input.as_str()];
        let foldable = matches!(g.nodes[producer].op, Op::Convolution(_) | Op::InnerProduct(_))
            && consumers[input.as_str()].len() == 1;
        if foldable {
            match &mut g.nodes[producer].op {
                Op::Convolution(conv) => fold_into(&mut conv.weight, &mut conv.bias, &s, &t),
                Op::InnerProduct(ip) => fold_into(&mut ip.weight, &mut ip.bias, &s, &t),
                _ => unreachable!(),
            }
            g.nodes[producer].outputs = node.outputs.clone();
            g.nodes.remove(idx);
        } else {
            let shape = &shapes[input];
            let channels = shape[0];
            let op = if shape.len() == 3 {
                let mut weight = Tensor::new(vec![channels, 1, 1, 1], vec![1.0; channels]);
                let mut bias = Vec::new();
                fold_into(&mut weight, &mut bias, &s, &t);
                Op::Convolution(Convolution { weight, bias, stride: 1, pad: 0, groups: channels })
            } else if shape.len() == 1 {
                let mut data = vec![0.0; channels * channels];
                for c in 0..channels {
                    data[c * channels + c] = 1.0;
                }
                let mut weight = Tensor::new(vec![channels, channels], data);
                let mut bias = Vec::new();
                fold_into(&mut weight, &mut bias, &s, &t);
                Op::InnerProduct(InnerProduct { weight, bias })
            } else {
                return Err(GraphError::BadNode { node: node.id.clone(), reason: format!("cannot fold rank-{} tensor", shape.len()) });
            };
            g.nodes[idx].op = op;
        }
    }
}

/// True when a join input has no explicitly scalable node between it and
/// the nearest fork: walking back through single-consumer ReLU and MaxPool
/// nodes must reach a convolution, inner product, or identity downscale
/// whose output is not shared.
pub fn needs_downscale_splice(graph: &Graph, tensor: &str) -> bool {
    let producers = graph.producers();
    let consumers = graph.consumers();
    let mut cur = tensor;
    loop {
        if consumers.get(cur).map_or(0, |c| c.len()) > 1 {
            return true;
        }
        let Some(&p) = producers.get(cur) else { return true };
        let node = &graph.nodes[p];
        match node.op {
            _ if node.op.is_scalable() => return false,
            Op::ReLU | Op::MaxPool(_) => cur = &node.inputs[0],
            _ => return true,
        }
    }
}

/// Inserts an identity downscale (factor 1) on every join input that cannot
/// otherwise be rescaled.
pub fn splice_identity_downscale(graph: &Graph) -> Graph {
    let mut g = graph.clone();
    let joins: Vec<String> = g.nodes.iter().filter(|n| n.op.is_join()).map(|n| n.id.clone()).collect();
    for join in joins {
        let arity = g.node(&join).unwrap().inputs.len();
        for slot in 0..arity {
            let tensor = g.node(&join).unwrap().inputs[slot].clone();
            if !needs_downscale_splice(&g, &tensor) {
                continue;
            }
            let name = g.fresh_name(&format!("{join}/downscale{slot}"));
            let splice = Node {
                id: name.clone(),
                op: Op::IdentityDownscale { factor: 1.0 },
                inputs: vec![tensor],
                outputs: vec![name.clone()],
            };
            let at = g.nodes.iter().position(|n| n.id == join).unwrap();
            g.nodes[at].inputs[slot] = name;
            g.nodes.insert(at, splice);
        }
    }
    g
}

/// Removes identity downscales whose factor is exactly 1.
pub fn splice_out_unity(graph: &Graph) -> Graph {
    let mut g = graph.clone();
    while let Some(idx) = g.nodes.iter().position(|n| matches!(n.op, Op::IdentityDownscale { factor } if factor == 1.0)) {
        let node = g.nodes.remove(idx);
        let (from, to) = (&node.outputs[0], &node.inputs[0]);
        for n in &mut g.nodes {
            for t in &mut n.inputs {
                if t == from {
                    *t = to.clone();
                }
            }
        }
    }
    g
}

/// Sets each identity downscale's factor to `min(1, γ_in / γ_out)` so that
/// branch scale `α_in / factor` matches the join scale.
pub fn assign_downscale_factors(graph: &Graph, thresholds: &HashMap<TensorId, f64>) -> Result<Graph, GraphError> {
    let mut g = graph.clone();
    for node in &mut g.nodes {
        if let Op::IdentityDownscale { factor } = &mut node.op {
            let lookup = |t: &String| thresholds.get(t).copied().ok_or_else(|| GraphError::MissingThreshold(t.clone()));
            let gamma_in = lookup(&node.inputs[0])?;
            let gamma_out = lookup(&node.outputs[0])?;
            *factor = (gamma_in / gamma_out).min(1.0);
        }
    }
    Ok(g)
}

/// The preprocessing pipeline run before calibration.
pub fn preprocess(graph: &Graph) -> Result<Graph, GraphError> {
    let merged = merge_fork_join(graph);
    let folded = fold_linear(&merged)?;
    Ok(splice_identity_downscale(&folded))
}
