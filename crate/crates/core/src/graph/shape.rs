use std::collections::HashMap;

use super::{Graph, GraphError, Node, Op, Pool, TensorId};

fn shape_err(node: &Node, reason: impl Into<String>) -> GraphError {
    GraphError::Shape { node: node.id.clone(), reason: reason.into() }
}

fn spatial(node: &Node, size: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize, GraphError> {
    if stride == 0 {
        return Err(shape_err(node, "stride must be positive"));
    }
    if size + 2 * pad < kernel || kernel == 0 {
        return Err(shape_err(node, format!("kernel {kernel} larger than padded extent {}", size + 2 * pad)));
    }
    Ok((size + 2 * pad - kernel) / stride + 1)
}

fn pool_shape(node: &Node, input: &[usize], pool: &Pool) -> Result<Vec<usize>, GraphError> {
    if input.len() != 3 {
        return Err(shape_err(node, format!("pooling needs a [C, H, W] input, got {input:?}")));
    }
    if pool.global {
        return Ok(vec![input[0], 1, 1]);
    }
    Ok(vec![
        input[0],
        spatial(node, input[1], pool.kernel, pool.stride, pool.pad)?,
        spatial(node, input[2], pool.kernel, pool.stride, pool.pad)?,
    ])
}

fn check_channels(node: &Node, input: &[usize], len: usize) -> Result<(), GraphError> {
    if input.first() != Some(&len) {
        return Err(shape_err(node, format!("{len} per-channel parameters for input {input:?}")));
    }
    Ok(())
}

/// Shapes of every tensor, propagated from the input node.
pub fn infer_shapes(graph: &Graph) -> Result<HashMap<TensorId, Vec<usize>>, GraphError> {
    let order = graph.topological_order()?;
    let mut shapes: HashMap<TensorId, Vec<usize>> = HashMap::new();
    for i in order {
        let node = &graph.nodes[i];
        let ins: Vec<&Vec<usize>> = node.inputs.iter().map(|t| &shapes[t]).collect();
        let arity = |k: usize| -> Result<(), GraphError> {
            if ins.len() != k {
                return Err(shape_err(node, format!("expected {k} input(s), got {}", ins.len())));
            }
            Ok(())
        };
        let out = match &node.op {
            Op::Input { shape } => {
                arity(0)?;
                shape.clone()
            }
            Op::Output => {
                arity(1)?;
                continue;
            }
            Op::Convolution(conv) => {
                arity(1)?;
                let x = ins[0];
                let w = &conv.weight.shape;
                if x.len() != 3 || w.len() != 4 {
                    return Err(shape_err(node, format!("convolution of {x:?} by weight {w:?}")));
                }
                if conv.groups == 0 || w[0] % conv.groups != 0 || w[1] * conv.groups != x[0] {
                    return Err(shape_err(node, format!("groups {} with weight {w:?} on {} channels", conv.groups, x[0])));
                }
                if !conv.bias.is_empty() && conv.bias.len() != w[0] {
                    return Err(shape_err(node, "bias length differs from output channels"));
                }
                vec![w[0], spatial(node, x[1], w[2], conv.stride, conv.pad)?, spatial(node, x[2], w[3], conv.stride, conv.pad)?]
            }
            Op::InnerProduct(ip) => {
                arity(1)?;
                let w = &ip.weight.shape;
                let numel: usize = ins[0].iter().product();
                if w.len() != 2 || w[1] != numel {
                    return Err(shape_err(node, format!("inner product weight {w:?} on {numel} inputs")));
                }
                if !ip.bias.is_empty() && ip.bias.len() != w[0] {
                    return Err(shape_err(node, "bias length differs from output channels"));
                }
                vec![w[0]]
            }
            Op::BatchNorm { mean, variance, .. } => {
                arity(1)?;
                check_channels(node, ins[0], mean.len())?;
                check_channels(node, ins[0], variance.len())?;
                ins[0].clone()
            }
            Op::Scale { factors } => {
                arity(1)?;
                check_channels(node, ins[0], factors.len())?;
                ins[0].clone()
            }
            Op::Bias { values } => {
                arity(1)?;
                check_channels(node, ins[0], values.len())?;
                ins[0].clone()
            }
            Op::ReLU | Op::IdentityDownscale { .. } => {
                arity(1)?;
                ins[0].clone()
            }
            Op::EltwiseAdd => {
                if ins.is_empty() {
                    return Err(shape_err(node, "no inputs"));
                }
                if ins.iter().any(|s| *s != ins[0]) {
                    return Err(shape_err(node, format!("inputs differ in shape: {ins:?}")));
                }
                ins[0].clone()
            }
            Op::Concat { axis } => {
                if ins.is_empty() {
                    return Err(shape_err(node, "no inputs"));
                }
                let rank = ins[0].len();
                if *axis >= rank {
                    return Err(shape_err(node, format!("axis {axis} out of range for rank {rank}")));
                }
                let mut out = ins[0].clone();
                out[*axis] = 0;
                for s in &ins {
                    let same = s.len() == rank && (0..rank).all(|d| d == *axis || s[d] == ins[0][d]);
                    if !same {
                        return Err(shape_err(node, format!("inputs differ off the concat axis: {ins:?}")));
                    }
                    out[*axis] += s[*axis];
                }
                out
            }
            Op::MaxPool(pool) | Op::AvgPool(pool) => {
                arity(1)?;
                pool_shape(node, ins[0], pool)?
            }
        };
        if node.outputs.len() != 1 {
            return Err(shape_err(node, "expected exactly one output tensor"));
        }
        shapes.insert(node.outputs[0].clone(), out);
    }
    Ok(shapes)
}
