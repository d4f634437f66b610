//! Quantized joins and value-preserving operators.

use num_bigint::BigInt;
use num_traits::{ToPrimitive, Zero};

use super::EngineError;
use crate::graph::Pool;
use crate::quantize::{QTensor, Scale};

pub(crate) fn tensor_alpha(node: &str, q: &QTensor) -> Result<f64, EngineError> {
    q.scale.per_tensor().ok_or_else(|| EngineError::Shape { node: node.to_string(), reason: "activation with per-channel scale".into() })
}

/// `Σ (α_i / α_z)·β_i`, rounded to the shared format. With equal scales the
/// sum is formed exactly in integers.
pub fn quantized_eltwise_add(node: &str, inputs: &[&QTensor], alpha_z: f64) -> Result<QTensor, EngineError> {
    let first = inputs.first().ok_or_else(|| EngineError::Shape { node: node.into(), reason: "no inputs".into() })?;
    let format = first.format;
    let mut ratios = Vec::with_capacity(inputs.len());
    for x in inputs {
        if x.format != format || x.shape != first.shape {
            return Err(EngineError::Shape { node: node.into(), reason: "inputs differ in format or shape".into() });
        }
        let a = tensor_alpha(node, x)?;
        if a > alpha_z {
            return Err(EngineError::ScaleOrder { node: node.into(), input: a, output: alpha_z });
        }
        ratios.push(a / alpha_z);
    }
    let book = format.codebook();
    let len = first.codes.len();
    let integer = ratios.iter().all(|&r| r == 1.0);
    let codes = match (integer, book.ints()) {
        (true, Some(table)) => (0..len)
            .map(|i| {
                let total: i128 = inputs.iter().map(|x| table[x.codes[i] as usize] as i128).sum();
                book.round_clamped(total as f64)
            })
            .collect(),
        (true, None) => (0..len)
            .map(|i| {
                let total = inputs.iter().fold(BigInt::zero(), |acc, x| {
                    let (m, k) = book.parts(x.codes[i]);
                    acc + (BigInt::from(m) << k)
                });
                book.round_clamped(total.to_f64().unwrap_or(f64::NAN))
            })
            .collect(),
        (false, _) => (0..len)
            .map(|i| {
                let total: f64 = inputs.iter().zip(&ratios).map(|(x, r)| r * book.value(x.codes[i])).sum();
                book.round_clamped(total)
            })
            .collect(),
    };
    Ok(QTensor { shape: first.shape.clone(), codes, format, scale: Scale::PerTensor(alpha_z) })
}

/// Replaces codes of negative values by the zero code.
pub fn quantized_relu(x: &QTensor) -> QTensor {
    let book = x.format.codebook();
    let zero = x.format.zero_code();
    let codes = x.codes.iter().map(|&c| if book.value(c) < 0.0 { zero } else { c }).collect();
    QTensor { codes, ..x.clone() }
}

/// Window maximum by decoded value over `[C, H, W]`; padding is ignored.
pub fn quantized_max_pool(node: &str, x: &QTensor, pool: &Pool) -> Result<QTensor, EngineError> {
    let book = x.format.codebook();
    let (shape, picks) = max_pool_indices(node, &x.shape, pool, |i| book.value(x.codes[i]))?;
    Ok(QTensor { shape, codes: picks.into_iter().map(|i| x.codes[i]).collect(), format: x.format, scale: x.scale.clone() })
}

/// Indices of the window maxima (first occurrence on ties).
pub(crate) fn max_pool_indices(
    node: &str,
    shape: &[usize],
    pool: &Pool,
    value: impl Fn(usize) -> f64,
) -> Result<(Vec<usize>, Vec<usize>), EngineError> {
    if shape.len() != 3 {
        return Err(EngineError::Shape { node: node.into(), reason: "pooling needs a [C, H, W] input".into() });
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let (k, stride, pad) = if pool.global { (h.max(w), 1, 0) } else { (pool.kernel, pool.stride, pool.pad) };
    let (kh, kw) = if pool.global { (h, w) } else { (k, k) };
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut picks = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best: Option<(f64, usize)> = None;
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = (ch * h + iy as usize) * w + ix as usize;
                        let v = value(idx);
                        if best.is_none_or(|(b, _)| v > b) {
                            best = Some((v, idx));
                        }
                    }
                }
                let (_, idx) = best.ok_or_else(|| EngineError::Shape { node: node.into(), reason: "empty pooling window".into() })?;
                picks.push(idx);
            }
        }
    }
    Ok((vec![c, oh, ow], picks))
}

/// Concatenates along `axis`; every input must carry the output scale.
pub fn quantized_concat(node: &str, inputs: &[&QTensor], axis: usize, alpha_z: f64) -> Result<QTensor, EngineError> {
    let first = inputs.first().ok_or_else(|| EngineError::Shape { node: node.into(), reason: "no inputs".into() })?;
    for x in inputs {
        if tensor_alpha(node, x)? != alpha_z || x.format != first.format {
            return Err(EngineError::ConcatScaleMismatch(node.into()));
        }
    }
    let shapes: Vec<&[usize]> = inputs.iter().map(|x| x.shape.as_slice()).collect();
    let slices: Vec<&[u16]> = inputs.iter().map(|x| x.codes.as_slice()).collect();
    let (shape, codes) = concat_along(node, &shapes, &slices, axis)?;
    Ok(QTensor { shape, codes, format: first.format, scale: Scale::PerTensor(alpha_z) })
}

pub(crate) fn concat_along<T: Copy>(
    node: &str,
    shapes: &[&[usize]],
    data: &[&[T]],
    axis: usize,
) -> Result<(Vec<usize>, Vec<T>), EngineError> {
    let rank = shapes[0].len();
    if axis >= rank || shapes.iter().any(|s| s.len() != rank || (0..rank).any(|d| d != axis && s[d] != shapes[0][d])) {
        return Err(EngineError::Shape { node: node.into(), reason: "inputs differ off the concat axis".into() });
    }
    let outer: usize = shapes[0][..axis].iter().product();
    let inner: usize = shapes[0][axis + 1..].iter().product();
    let mut shape = shapes[0].to_vec();
    shape[axis] = shapes.iter().map(|s| s[axis]).sum();
    let mut out = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for (s, d) in shapes.iter().zip(data) {
            let block = s[axis] * inner;
            out.extend_from_slice(&d[o * block..(o + 1) * block]);
        }
    }
    Ok((shape, out))
}

/// Requantizes from `x`'s scale to `alpha_out`: `β·(α_in / α_out)`, rounded.
pub fn quantized_downscale(node: &str, x: &QTensor, alpha_out: f64) -> Result<QTensor, EngineError> {
    let alpha_in = tensor_alpha(node, x)?;
    let book = x.format.codebook();
    let codes = if alpha_in == alpha_out {
        x.codes.clone()
    } else {
        let ratio = alpha_in / alpha_out;
        x.codes.iter().map(|&c| book.round_clamped(book.value(c) * ratio)).collect()
    };
    Ok(QTensor { shape: x.shape.clone(), codes, format: x.format, scale: Scale::PerTensor(alpha_out) })
}
