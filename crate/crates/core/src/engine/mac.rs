//! Exact multiply-accumulate layers: convolution, inner product, and average
//! pooling (a depthwise convolution with unit weights).

use num_bigint::BigUint;
use num_traits::{FromPrimitive, Zero};
use serde::{Deserialize, Serialize};

use super::kernels::{convolve, split_integer, Acc128, Acc64, BucketAcc, ConvGeometry};
use super::{BiasMode, EngineConfig, EngineError};
use crate::accumulator::{bits_to_reach, mac_max_n, mac_spec, AccumulatorSpec, OperandRange};
use crate::format::{Codebook, FloatFormat};
use crate::graph::{Node, Op, Pool};
use crate::quantize::{QTensor, Scale};

/// Register type used for a node's accumulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AccumulatorKind {
    Int64,
    Int128,
    /// Per-exponent `i64` partial sums combined in a big integer.
    Buckets,
}

/// Accumulator sizing of one multiply-accumulate node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccumulatorReport {
    pub node: String,
    /// Terms per output element.
    pub terms: u64,
    /// Minimal width for the products alone, and the capacity at that width.
    pub spec: AccumulatorSpec,
    /// Minimal width once the largest bias is added.
    pub q_with_bias: u32,
    pub kind: AccumulatorKind,
}

#[derive(Debug, Clone)]
enum Weights {
    Ints(Vec<i64>),
    Parts(Vec<(i64, u32)>),
}

#[derive(Debug, Clone)]
enum BiasTerm {
    None,
    /// Integer-valued, at scale `α_x·α_w[c]`.
    Accumulator(Vec<f64>),
    /// Real bias added after the rescale.
    Output(Vec<f64>),
}

/// A multiply-accumulate node bound to its input scale and ready to run.
#[derive(Debug, Clone)]
pub struct PreparedMac {
    node: String,
    geometry: ConvGeometry,
    activation: FloatFormat,
    alpha_x: f64,
    alpha_w: Vec<f64>,
    weights: Weights,
    bias: BiasTerm,
    kind: AccumulatorKind,
    max_shift: u32,
    /// Inner products emit `[C]` rather than `[C, H, W]`.
    dense: bool,
    report: AccumulatorReport,
}

/// Quantized weights of one convolution or inner product.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedWeights {
    pub codes: QTensor,
    /// Per-output-channel thresholds.
    pub gamma: Vec<f64>,
    /// Output channels whose weights are all zero.
    pub degenerate: Vec<usize>,
}

fn biguint(v: f64) -> BigUint {
    BigUint::from_f64(v.abs()).unwrap_or_else(BigUint::zero)
}

fn operand_range(beta_max: f64) -> OperandRange {
    OperandRange::symmetric(biguint(beta_max).max(BigUint::from(1u32))).expect("positive bound")
}

impl PreparedMac {
    /// Binds a convolution, inner product, or average pool to an input of
    /// `input_shape` quantized in `activation` at scale `alpha_x`.
    pub fn new(
        node: &Node,
        weights: Option<&QuantizedWeights>,
        input_shape: &[usize],
        activation: FloatFormat,
        alpha_x: f64,
        config: &EngineConfig,
    ) -> Result<Self, EngineError> {
        let shape_err = |reason: &str| EngineError::Shape { node: node.id.clone(), reason: reason.to_string() };
        let missing = || EngineError::MissingWeights(node.id.clone());
        let (geometry, weight_codes, weight_format, alpha_w, bias): (ConvGeometry, Vec<u16>, FloatFormat, Vec<f64>, Vec<f32>) =
            match &node.op {
                Op::Convolution(conv) => {
                    let w = weights.ok_or_else(missing)?;
                    if input_shape.len() != 3 {
                        return Err(shape_err("convolution needs a [C, H, W] input"));
                    }
                    let (kh, kw) = conv.kernel();
                    let g = ConvGeometry {
                        in_channels: input_shape[0],
                        height: input_shape[1],
                        width: input_shape[2],
                        out_channels: conv.out_channels(),
                        kernel_h: kh,
                        kernel_w: kw,
                        stride: conv.stride,
                        pad: conv.pad,
                        groups: conv.groups,
                    };
                    let alphas = (0..g.out_channels).map(|c| w.codes.scale.for_channel(c)).collect();
                    (g, w.codes.codes.clone(), w.codes.format, alphas, conv.bias.clone())
                }
                Op::InnerProduct(ip) => {
                    let w = weights.ok_or_else(missing)?;
                    let numel = input_shape.iter().product();
                    let g = ConvGeometry::dense(numel, ip.out_channels());
                    if ip.weight.shape[1] != numel {
                        return Err(shape_err("inner product weight does not match input size"));
                    }
                    let alphas = (0..g.out_channels).map(|c| w.codes.scale.for_channel(c)).collect();
                    (g, w.codes.codes.clone(), w.codes.format, alphas, ip.bias.clone())
                }
                Op::AvgPool(pool) => {
                    let g = avgpool_geometry(pool, input_shape).ok_or_else(|| shape_err("average pooling needs a [C, H, W] input"))?;
                    let area = (g.kernel_h * g.kernel_w) as f64;
                    // unit weights in a format where 1 is exact
                    let ones = FloatFormat::new(2, 1).expect("valid format");
                    let one = ones.round_to_format(1.0).expect("1 is representable");
                    let codes = vec![one; g.out_channels * g.kernel_h * g.kernel_w];
                    (g, codes, ones, vec![1.0 / area; g.out_channels], Vec::new())
                }
                _ => return Err(EngineError::Unsupported { node: node.id.clone(), kind: node.op.kind() }),
            };
        if let Some(reason) = geometry.check() {
            return Err(shape_err(&reason));
        }
        if weight_codes.len() != geometry.out_channels * geometry.reduction_size() {
            return Err(shape_err("weight size does not match the layer geometry"));
        }

        let x_book = activation.codebook();
        let w_book = weight_format.codebook();
        let terms = geometry.reduction_size() as u64;
        let bx = operand_range(x_book.beta_max());
        let bw = operand_range(w_book.beta_max());
        let spec = mac_spec(&bx, &bw, terms)?;

        let bias = if bias.is_empty() {
            BiasTerm::None
        } else {
            match config.bias_mode {
                BiasMode::Accumulator => BiasTerm::Accumulator(
                    bias.iter().zip(&alpha_w).map(|(&b, &aw)| (b as f64 / (alpha_x * aw)).round_ties_even()).collect(),
                ),
                BiasMode::Output => BiasTerm::Output(bias.iter().map(|&b| b as f64).collect()),
            }
        };
        let bias_bound = match &bias {
            BiasTerm::Accumulator(v) => v.iter().fold(0.0f64, |m, b| m.max(b.abs())),
            _ => 0.0,
        };
        if !bias_bound.is_finite() {
            return Err(EngineError::Shape { node: node.id.clone(), reason: "bias does not fit the accumulator scale".into() });
        }
        let product_bound = BigUint::from(terms) * biguint(x_book.beta_max()) * biguint(w_book.beta_max());
        let q_with_bias = bits_to_reach(&(product_bound + biguint(bias_bound) + 1u32));

        if let Some(limit) = config.accumulator_bits {
            if q_with_bias > limit {
                let n_max = mac_max_n(&bx, &bw, limit).map(|n| n.to_string()).unwrap_or_else(|_| "0".into());
                return Err(EngineError::AccumulatorTooNarrow { node: node.id.clone(), terms, q: q_with_bias, limit, n_max });
            }
        }
        let ints = x_book.ints().is_some() && w_book.ints().is_some();
        let kind = if ints && q_with_bias <= 64 {
            AccumulatorKind::Int64
        } else if ints && q_with_bias <= 128 {
            AccumulatorKind::Int128
        } else {
            AccumulatorKind::Buckets
        };
        let weights = match (kind, w_book.ints()) {
            (AccumulatorKind::Buckets, _) | (_, None) => Weights::Parts(weight_codes.iter().map(|&c| w_book.parts(c)).collect()),
            (_, Some(table)) => Weights::Ints(weight_codes.iter().map(|&c| table[c as usize]).collect()),
        };
        let max_k = |book: &Codebook, codes: &mut dyn Iterator<Item = u16>| codes.map(|c| book.parts(c).1).max().unwrap_or(0);
        let x_shift = max_k(&x_book, &mut (0..activation.code_count()).map(|c| c as u16));
        let w_shift = max_k(&w_book, &mut weight_codes.iter().copied());
        let bias_shift = match &bias {
            BiasTerm::Accumulator(v) => v.iter().map(|&b| split_integer(b).1).max().unwrap_or(0),
            _ => 0,
        };
        let max_shift = (x_shift + w_shift).max(bias_shift);

        let report = AccumulatorReport { node: node.id.clone(), terms, spec, q_with_bias, kind };
        Ok(PreparedMac {
            node: node.id.clone(),
            geometry,
            activation,
            alpha_x,
            alpha_w,
            weights,
            bias,
            kind,
            max_shift,
            dense: matches!(node.op, Op::InnerProduct(_)),
            report,
        })
    }

    pub fn report(&self) -> &AccumulatorReport {
        &self.report
    }

    pub fn geometry(&self) -> &ConvGeometry {
        &self.geometry
    }

    pub fn out_shape(&self) -> Vec<usize> {
        if self.dense {
            vec![self.geometry.out_channels]
        } else {
            vec![self.geometry.out_channels, self.geometry.out_height(), self.geometry.out_width()]
        }
    }

    fn check_input(&self, x: &QTensor) -> Result<(), EngineError> {
        if x.format != self.activation || x.codes.len() != self.geometry.in_channels * self.geometry.height * self.geometry.width {
            return Err(EngineError::Shape { node: self.node.clone(), reason: "input does not match the prepared layer".into() });
        }
        Ok(())
    }

    /// Exact integer totals `Σ β_x·β_w` (plus the accumulator-domain bias),
    /// converted to the nearest double.
    pub fn totals(&self, x: &QTensor) -> Result<Vec<f64>, EngineError> {
        self.check_input(x)?;
        let book = self.activation.codebook();
        let mut out = vec![0.0; self.geometry.out_len()];
        let bias_of = |oc: usize| match &self.bias {
            BiasTerm::Accumulator(v) => v[oc],
            _ => 0.0,
        };
        match (&self.weights, self.kind) {
            (Weights::Ints(w), AccumulatorKind::Int64) => {
                let table = book.ints().expect("integer table");
                let xs: Vec<i64> = x.codes.iter().map(|&c| table[c as usize]).collect();
                let bias: Vec<i64> = (0..self.geometry.out_channels).map(|c| bias_of(c) as i64).collect();
                convolve(&self.geometry, &xs, w, &mut Acc64(0), |oc, i, acc| out[i] = (acc.0 + bias[oc]) as f64);
            }
            (Weights::Ints(w), AccumulatorKind::Int128) => {
                let table = book.ints().expect("integer table");
                let xs: Vec<i64> = x.codes.iter().map(|&c| table[c as usize]).collect();
                let bias: Vec<i128> = (0..self.geometry.out_channels)
                    .map(|c| {
                        let (m, k) = split_integer(bias_of(c));
                        (m as i128) << k
                    })
                    .collect();
                convolve(&self.geometry, &xs, w, &mut Acc128(0), |oc, i, acc| out[i] = (acc.0 + bias[oc]) as f64);
            }
            (Weights::Parts(w), _) => {
                let xs: Vec<(i64, u32)> = x.codes.iter().map(|&c| book.parts(c)).collect();
                let bias: Vec<(i64, u32)> = (0..self.geometry.out_channels).map(|c| split_integer(bias_of(c))).collect();
                convolve(&self.geometry, &xs, w, &mut BucketAcc::new(self.max_shift), |oc, i, acc| {
                    acc.add(bias[oc].0, bias[oc].1);
                    out[i] = acc.total_f64();
                });
            }
            (Weights::Ints(_), AccumulatorKind::Buckets) => unreachable!("bucket plans carry exact parts"),
        }
        Ok(out)
    }

    /// Real-valued outputs `α_x·α_w·total` (plus the real bias in output mode).
    pub fn real_outputs(&self, x: &QTensor) -> Result<Vec<f64>, EngineError> {
        let totals = self.totals(x)?;
        let plane = self.geometry.plane();
        Ok(totals
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let c = i / plane;
                let v = t * (self.alpha_x * self.alpha_w[c]);
                match &self.bias {
                    BiasTerm::Output(b) => v + b[c],
                    _ => v,
                }
            })
            .collect())
    }

    /// Codes at output scale `alpha_z`: each total times `α_x·α_w / α_z`,
    /// rounded to the activation format.
    pub fn requantize(&self, totals: &[f64], alpha_z: f64) -> Vec<u16> {
        let book = self.activation.codebook();
        let plane = self.geometry.plane();
        let ratios: Vec<f64> = self.alpha_w.iter().map(|&aw| self.alpha_x * aw / alpha_z).collect();
        let bias: Vec<f64> = match &self.bias {
            // the output-mode bias is itself a code of the output format
            BiasTerm::Output(b) => b.iter().map(|&v| book.value(book.round_clamped(v / alpha_z))).collect(),
            _ => vec![0.0; ratios.len()],
        };
        totals
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let c = i / plane;
                book.round_clamped(t * ratios[c] + bias[c])
            })
            .collect()
    }

    /// Runs the layer on `x` and quantizes at `alpha_z`.
    pub fn run(&self, x: &QTensor, alpha_z: f64) -> Result<QTensor, EngineError> {
        let totals = self.totals(x)?;
        Ok(QTensor {
            shape: self.out_shape(),
            codes: self.requantize(&totals, alpha_z),
            format: self.activation,
            scale: Scale::PerTensor(alpha_z),
        })
    }
}

/// Geometry of an average pool viewed as a depthwise convolution.
pub fn avgpool_geometry(pool: &Pool, input_shape: &[usize]) -> Option<ConvGeometry> {
    if input_shape.len() != 3 {
        return None;
    }
    let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    let (kh, kw, stride, pad) = if pool.global { (h, w, 1, 0) } else { (pool.kernel, pool.kernel, pool.stride, pool.pad) };
    Some(ConvGeometry { in_channels: c, height: h, width: w, out_channels: c, kernel_h: kh, kernel_w: kw, stride, pad, groups: c })
}
