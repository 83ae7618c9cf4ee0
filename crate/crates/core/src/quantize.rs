//! Post-training int8 weight quantization and the int8 forward path.
//!
//! Kernels use symmetric per-tensor quantization (`zero_point = 0`,
//! `scale = max|w| / 127`). Biases and batch-norm parameters stay f32.
//!
//! In the quantized forward pass each layer input is quantized on the fly
//! with an asymmetric int8 scale taken from that input's own min/max, so no
//! calibration set is needed. Products accumulate in i32 and are rescaled to
//! f32 before bias and ReLU.

use thiserror::Error;

use crate::cnn::{self, conv_out_len, CnnError, InferenceResult, Tensor3, ARCHITECTURE};
use crate::mfcc::MfccMatrix;
use crate::weights::{Kernel, ModelWeights, KERNEL_SIZE};

#[derive(Debug, Error, PartialEq)]
pub enum QuantizeError {
    #[error("cannot quantize an empty tensor")]
    EmptyInput,
    #[error("tensor contains a non-finite value at index {0}")]
    NonFiniteInput(usize),
    #[error("{0} is not int8-quantized")]
    NotQuantized(&'static str),
    #[error(transparent)]
    Cnn(#[from] CnnError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub values: Vec<i8>,
    pub scale: f32,
    pub zero_point: i32,
    pub shape: Vec<usize>,
}

impl QuantizedTensor {
    /// `scale * (q - zero_point)` per element.
    pub fn dequantize(&self) -> Vec<f32> {
        self.values.iter().map(|&q| self.scale * (i32::from(q) - self.zero_point) as f32).collect()
    }

    /// Dequantized values evaluated in f64, for error analysis.
    pub fn dequantize_f64(&self) -> Vec<f64> {
        self.values
            .iter()
            .map(|&q| f64::from(self.scale) * f64::from(i32::from(q) - self.zero_point))
            .collect()
    }
}

/// Symmetric int8 quantization of a whole tensor.
pub fn quantize_tensor(values: &[f32], shape: &[usize]) -> Result<QuantizedTensor, QuantizeError> {
    if values.is_empty() {
        return Err(QuantizeError::EmptyInput);
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(QuantizeError::NonFiniteInput(i));
    }
    let max_abs = values.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let scale = if max_abs == 0.0 { 1.0 } else { max_abs / 127.0 };
    let s = f64::from(scale);
    let q = values
        .iter()
        .map(|&v| (f64::from(v) / s).round().clamp(-127.0, 127.0) as i8)
        .collect();
    Ok(QuantizedTensor { values: q, scale, zero_point: 0, shape: shape.to_vec() })
}

fn quantize_kernel(k: &Kernel, shape: &[usize]) -> Kernel {
    match k {
        Kernel::I8(_) => k.clone(),
        // loaded weights are always finite and non-empty
        Kernel::F32(v) => Kernel::I8(quantize_tensor(v, shape).expect("finite kernel")),
    }
}

/// Quantizes every conv and dense kernel. Already-quantized kernels are
/// left as they are.
pub fn quantize_model(weights: &ModelWeights) -> ModelWeights {
    let mut out = weights.clone();
    for c in &mut out.conv {
        c.kernel = quantize_kernel(&c.kernel, &[KERNEL_SIZE, KERNEL_SIZE, c.in_channels, c.filters]);
    }
    out.dense.kernel = quantize_kernel(&out.dense.kernel, &[out.dense.kernel.len(), 1]);
    out
}

/// Asymmetric per-tensor quantization of an activation, with zero always
/// exactly representable. Returns centred values `q - zero_point` and the
/// scale.
fn quantize_activation(x: &[f32]) -> (Vec<i32>, f32) {
    let lo = x.iter().fold(0.0f32, |m, &v| m.min(v));
    let hi = x.iter().fold(0.0f32, |m, &v| m.max(v));
    if hi == lo {
        return (vec![0; x.len()], 1.0);
    }
    let scale = (hi - lo) / 255.0;
    let zp = (-128.0 - lo / scale).round().clamp(-128.0, 127.0) as i32;
    let centred = x
        .iter()
        .map(|&v| ((v / scale).round() as i32 + zp).clamp(-128, 127) - zp)
        .collect();
    (centred, scale)
}

fn conv2d_i8(input: &Tensor3, kernel: &QuantizedTensor, bias: &[f32]) -> Result<Tensor3, CnnError> {
    if input.h < KERNEL_SIZE || input.w < KERNEL_SIZE {
        return Err(CnnError::InputTooSmall { h: input.h, w: input.w });
    }
    let c = input.c;
    let f = bias.len();
    if kernel.values.len() != KERNEL_SIZE * KERNEL_SIZE * c * f {
        return Err(CnnError::ShapeMismatch(format!("int8 kernel does not match 3x3x{c}x{f}")));
    }
    let (qa, sa) = quantize_activation(&input.data);
    let qw: Vec<i32> = kernel.values.iter().map(|&q| i32::from(q) - kernel.zero_point).collect();
    let rescale = sa * kernel.scale;

    let (oh, ow) = (conv_out_len(input.h), conv_out_len(input.w));
    let mut out = Tensor3::zeros(oh, ow, f);
    let mut acc = vec![0i32; f];
    for oy in 0..oh {
        for ox in 0..ow {
            acc.iter_mut().for_each(|a| *a = 0);
            for ky in 0..KERNEL_SIZE {
                for kx in 0..KERNEL_SIZE {
                    let base = ((oy * 2 + ky) * input.w + ox * 2 + kx) * c;
                    let taps = &qw[(ky * KERNEL_SIZE + kx) * c * f..][..c * f];
                    for (ci, &v) in qa[base..base + c].iter().enumerate() {
                        if v == 0 {
                            continue;
                        }
                        for (a, &k) in acc.iter_mut().zip(&taps[ci * f..(ci + 1) * f]) {
                            *a += v * k;
                        }
                    }
                }
            }
            let dst = &mut out.data[(oy * ow + ox) * f..][..f];
            for ((d, &a), &b) in dst.iter_mut().zip(&acc).zip(bias) {
                *d = (a as f32 * rescale + b).max(0.0);
            }
        }
    }
    Ok(out)
}

fn dense_i8(kernel: &QuantizedTensor, bias: f32, v: &[f32]) -> f32 {
    let (qa, sa) = quantize_activation(v);
    let acc: i32 = qa
        .iter()
        .zip(&kernel.values)
        .map(|(&a, &k)| a * (i32::from(k) - kernel.zero_point))
        .sum();
    acc as f32 * sa * kernel.scale + bias
}

fn expect_i8<'a>(k: &'a Kernel, name: &'static str) -> Result<&'a QuantizedTensor, QuantizeError> {
    match k {
        Kernel::I8(q) => Ok(q),
        Kernel::F32(_) => Err(QuantizeError::NotQuantized(name)),
    }
}

/// Forward pass with int8 kernels and dynamically quantized activations.
pub fn forward_quantized(features: &MfccMatrix, weights: &ModelWeights) -> Result<InferenceResult, QuantizeError> {
    let kernels = [
        expect_i8(&weights.conv[0].kernel, "conv1")?,
        expect_i8(&weights.conv[1].kernel, "conv2")?,
        expect_i8(&weights.conv[2].kernel, "conv3")?,
    ];
    let dense = expect_i8(&weights.dense.kernel, "dense")?;
    Ok(cnn::run_layers(
        features,
        weights,
        &ARCHITECTURE,
        false,
        |i, t| conv2d_i8(t, kernels[i], &weights.conv[i].bias),
        |v| dense_i8(dense, weights.dense.bias, v),
    )?)
}
