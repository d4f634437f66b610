//! Post-training quantization of CNNs to a parametric dynamic floating-point
//! format, with exact integer accumulation at inference time.

pub mod accumulator;
pub mod calibration;
pub mod engine;
pub mod format;
pub mod graph;
pub mod quantize;
pub mod tensor;

pub use format::{Encoding, FloatFormat, FormatError, SpecialValues};
pub use quantize::{dequantize_tensor, quantize_tensor, QTensor, Scale, ScaledFormat, Threshold};
pub use tensor::Tensor;
