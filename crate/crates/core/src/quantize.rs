//! Real tensors to scaled codes and back.

use serde::{Deserialize, Serialize};

use crate::format::{scale_from_threshold, FloatFormat, FormatError};
use crate::tensor::Tensor;

/// Scale `α` of a quantized tensor: one value, or one per slice of the
/// leading (output-channel) axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scale {
    PerTensor(f64),
    PerChannel(Vec<f64>),
}

impl Scale {
    #[inline]
    pub fn for_channel(&self, channel: usize) -> f64 {
        match self {
            Scale::PerTensor(a) => *a,
            Scale::PerChannel(v) => v[channel],
        }
    }

    pub fn per_tensor(&self) -> Option<f64> {
        match self {
            Scale::PerTensor(a) => Some(*a),
            Scale::PerChannel(_) => None,
        }
    }
}

/// Threshold `γ` for quantization: one value or one per output channel.
#[derive(Debug, Clone, PartialEq)]
pub enum Threshold {
    PerTensor(f64),
    PerChannel(Vec<f64>),
}

/// A format plus its scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaledFormat {
    pub format: FloatFormat,
    pub alpha: f64,
}

impl ScaledFormat {
    pub fn from_threshold(format: FloatFormat, gamma: f64) -> Result<Self, FormatError> {
        Ok(ScaledFormat { format, alpha: scale_from_threshold(gamma, &format)? })
    }

    /// `γ = α × β_max`.
    pub fn threshold(&self) -> f64 {
        self.alpha * self.format.beta_max()
    }
}

/// Codes of one tensor plus the format and scale needed to read them.
#[derive(Debug, Clone, PartialEq)]
pub struct QTensor {
    pub shape: Vec<usize>,
    pub codes: Vec<u16>,
    pub format: FloatFormat,
    pub scale: Scale,
}

impl QTensor {
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    fn channel_stride(&self) -> usize {
        self.shape.iter().skip(1).product::<usize>().max(1)
    }

    /// Decoded `β` values.
    pub fn betas(&self) -> Vec<f64> {
        let book = self.format.codebook();
        self.codes.iter().map(|&c| book.value(c)).collect()
    }
}

/// Clamps to `[-γ, γ]`, divides by `α = γ / β_max`, and rounds every element.
pub fn quantize_tensor(x: &Tensor, gamma: &Threshold, format: FloatFormat) -> Result<QTensor, FormatError> {
    let book = format.codebook();
    let beta_max = book.beta_max();
    let stride = x.channel_stride().max(1);
    let (gammas, scale) = match gamma {
        Threshold::PerTensor(g) => {
            let a = scale_from_threshold(*g, &format)?;
            (vec![*g], Scale::PerTensor(a))
        }
        Threshold::PerChannel(gs) => {
            if gs.len() != x.channels() {
                return Err(FormatError::ChannelMismatch { expected: x.channels(), got: gs.len() });
            }
            let alphas = gs.iter().map(|g| scale_from_threshold(*g, &format)).collect::<Result<Vec<_>, _>>()?;
            (gs.clone(), Scale::PerChannel(alphas))
        }
    };
    let mut codes = Vec::with_capacity(x.len());
    for (i, &v) in x.data.iter().enumerate() {
        if v.is_nan() {
            return Err(FormatError::NotANumber);
        }
        let channel = if gammas.len() == 1 { 0 } else { i / stride };
        let g = gammas[channel];
        let a = scale.for_channel(channel);
        let clamped = (v as f64).clamp(-g, g);
        let beta = (clamped / a).clamp(-beta_max, beta_max);
        codes.push(book.round_clamped(beta));
    }
    Ok(QTensor { shape: x.shape.clone(), codes, format, scale })
}

/// Elementwise `α × decode(code)`.
pub fn dequantize_tensor(q: &QTensor) -> Tensor {
    let book = q.format.codebook();
    let stride = q.channel_stride();
    let data = q
        .codes
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let a = q.scale.for_channel(if matches!(q.scale, Scale::PerTensor(_)) { 0 } else { i / stride });
            (a * book.value(c)) as f32
        })
        .collect();
    Tensor { shape: q.shape.clone(), data }
}
