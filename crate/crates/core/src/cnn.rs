//! Float forward pass of the detector network.
//!
//! ```text
//! input (40, n_frames, 1)
//!   conv1 3x3/2 valid, 16 filters, ReLU   -> dropout
//!   conv2 3x3/2 valid, 32 filters, ReLU   -> dropout
//!   conv3 3x3/2 valid, 40 filters, ReLU   -> dropout
//!   global max pool                       -> 40
//!   batch norm (inference)                -> 40
//!   dense 40 -> 1, sigmoid
//! ```
//!
//! Dropout is the identity at inference. All arithmetic is f32.

use serde::Serialize;
use thiserror::Error;

use crate::mfcc::MfccMatrix;
use crate::weights::{BatchNorm, ModelWeights, KERNEL_SIZE};

const STRIDE: usize = 2;

#[derive(Debug, Error, PartialEq)]
pub enum CnnError {
    #[error("input {h}x{w} is smaller than the 3x3 kernel")]
    InputTooSmall { h: usize, w: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Dense `H x W x C` feature map, channel-last.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f32>,
}

impl Tensor3 {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self { h, w, c, data: vec![0.0; h * w * c] }
    }

    pub fn from_vec(h: usize, w: usize, c: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), h * w * c);
        Self { h, w, c, data }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, ch: usize) -> f32 {
        self.data[(y * self.w + x) * self.c + ch]
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.h, self.w, self.c]
    }
}

impl From<&MfccMatrix> for Tensor3 {
    fn from(m: &MfccMatrix) -> Self {
        Tensor3::from_vec(m.n_mfcc, m.n_frames, 1, m.coefficients.clone())
    }
}

/// Output length of a 3-wide stride-2 valid convolution; zero when the
/// input is narrower than the kernel.
pub fn conv_out_len(n: usize) -> usize {
    if n < KERNEL_SIZE {
        0
    } else {
        (n - KERNEL_SIZE) / STRIDE + 1
    }
}

/// 3x3 convolution, stride 2 on both axes, no padding, then bias and ReLU.
/// `kernel` is `[3][3][C][F]`.
pub fn conv2d_valid_s2(input: &Tensor3, kernel: &[f32], bias: &[f32]) -> Result<Tensor3, CnnError> {
    if input.h < KERNEL_SIZE || input.w < KERNEL_SIZE {
        return Err(CnnError::InputTooSmall { h: input.h, w: input.w });
    }
    let c = input.c;
    let f = bias.len();
    if kernel.len() != KERNEL_SIZE * KERNEL_SIZE * c * f {
        return Err(CnnError::ShapeMismatch(format!(
            "kernel has {} values, expected 3x3x{c}x{f}",
            kernel.len()
        )));
    }
    let (oh, ow) = (conv_out_len(input.h), conv_out_len(input.w));
    let mut out = Tensor3::zeros(oh, ow, f);
    let mut acc = vec![0.0f32; f];
    for oy in 0..oh {
        for ox in 0..ow {
            acc.copy_from_slice(bias);
            for ky in 0..KERNEL_SIZE {
                for kx in 0..KERNEL_SIZE {
                    let base = ((oy * STRIDE + ky) * input.w + ox * STRIDE + kx) * c;
                    let pixel = &input.data[base..base + c];
                    let taps = &kernel[(ky * KERNEL_SIZE + kx) * c * f..][..c * f];
                    for (ci, &v) in pixel.iter().enumerate() {
                        let row = &taps[ci * f..(ci + 1) * f];
                        for (a, &k) in acc.iter_mut().zip(row) {
                            *a += v * k;
                        }
                    }
                }
            }
            let dst = &mut out.data[(oy * ow + ox) * f..][..f];
            for (d, &a) in dst.iter_mut().zip(&acc) {
                *d = a.max(0.0);
            }
        }
    }
    Ok(out)
}

/// Per-channel maximum over all spatial positions.
pub fn global_max_pool(input: &Tensor3) -> Vec<f32> {
    let mut out = vec![f32::NEG_INFINITY; input.c];
    for px in input.data.chunks_exact(input.c) {
        for (o, &v) in out.iter_mut().zip(px) {
            *o = o.max(v);
        }
    }
    out
}

/// `gamma * (v - mean) / sqrt(var + eps) + beta`
pub fn batch_norm_inference(v: &[f32], bn: &BatchNorm) -> Vec<f32> {
    v.iter()
        .enumerate()
        .map(|(i, &x)| bn.gamma[i] * (x - bn.moving_mean[i]) / (bn.moving_var[i] + bn.epsilon).sqrt() + bn.beta[i])
        .collect()
}

/// Logistic function, kept strictly inside (0, 1) where f32 would round to
/// an endpoint.
pub fn sigmoid(x: f32) -> f32 {
    (1.0 / (1.0 + (-x).exp())).clamp(f32::MIN_POSITIVE, 1.0 - f32::EPSILON / 2.0)
}

/// Layers in network order, mirroring the model summary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Layer {
    Conv(usize),
    Dropout,
    GlobalMaxPool,
    BatchNorm,
    Dense,
}

pub const ARCHITECTURE: [Layer; 9] = [
    Layer::Conv(0),
    Layer::Dropout,
    Layer::Conv(1),
    Layer::Dropout,
    Layer::Conv(2),
    Layer::Dropout,
    Layer::GlobalMaxPool,
    Layer::BatchNorm,
    Layer::Dense,
];

#[derive(Debug, Clone, PartialEq)]
pub enum Activation {
    Map(Tensor3),
    Vector(Vec<f32>),
}

impl Activation {
    pub fn shape(&self) -> Vec<usize> {
        match self {
            Activation::Map(t) => t.shape().to_vec(),
            Activation::Vector(v) => vec![v.len()],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceResult {
    pub probability: f32,
    /// Dense pre-activation.
    pub logit: f32,
    /// Output of each layer in [`ARCHITECTURE`] order, when traced.
    pub layer_activations: Option<Vec<(Layer, Activation)>>,
}

impl InferenceResult {
    pub fn is_cough(&self, threshold: f32) -> bool {
        self.probability >= threshold
    }
}

pub(crate) fn check_input(features: &MfccMatrix, weights: &ModelWeights) -> Result<(), CnnError> {
    if (features.n_mfcc, features.n_frames) != weights.input_shape {
        return Err(CnnError::ShapeMismatch(format!(
            "features are ({}, {}) but the weights expect {:?}",
            features.n_mfcc, features.n_frames, weights.input_shape
        )));
    }
    Ok(())
}

pub(crate) fn run_layers(
    features: &MfccMatrix,
    weights: &ModelWeights,
    layers: &[Layer],
    trace: bool,
    mut conv: impl FnMut(usize, &Tensor3) -> Result<Tensor3, CnnError>,
    mut dense: impl FnMut(&[f32]) -> f32,
) -> Result<InferenceResult, CnnError> {
    check_input(features, weights)?;
    let mut act = Activation::Map(Tensor3::from(features));
    let mut logit = None;
    let mut trail = trace.then(Vec::new);
    for &layer in layers {
        act = match (layer, act) {
            (Layer::Conv(i), Activation::Map(t)) => Activation::Map(conv(i, &t)?),
            (Layer::Dropout, a) => a,
            (Layer::GlobalMaxPool, Activation::Map(t)) => Activation::Vector(global_max_pool(&t)),
            (Layer::BatchNorm, Activation::Vector(v)) => Activation::Vector(batch_norm_inference(&v, &weights.bn)),
            (Layer::Dense, Activation::Vector(v)) => {
                let z = dense(&v);
                logit = Some(z);
                Activation::Vector(vec![sigmoid(z)])
            }
            (layer, a) => {
                return Err(CnnError::ShapeMismatch(format!("{layer:?} cannot take a {:?} input", a.shape())));
            }
        };
        if let Some(t) = trail.as_mut() {
            t.push((layer, act.clone()));
        }
    }
    let logit = logit.ok_or_else(|| CnnError::ShapeMismatch("layer list has no dense output".into()))?;
    Ok(InferenceResult { probability: sigmoid(logit), logit, layer_activations: trail })
}

pub(crate) fn dense_f32(kernel: &[f32], bias: f32, v: &[f32]) -> f32 {
    v.iter().zip(kernel).fold(bias, |acc, (x, k)| acc + x * k)
}

/// Runs an arbitrary layer list with float kernels.
pub fn forward_layers(
    features: &MfccMatrix,
    weights: &ModelWeights,
    layers: &[Layer],
    trace: bool,
) -> Result<InferenceResult, CnnError> {
    let kernels: Vec<Vec<f32>> = weights.conv.iter().map(|c| c.kernel.to_f32()).collect();
    let dense_kernel = weights.dense.kernel.to_f32();
    run_layers(
        features,
        weights,
        layers,
        trace,
        |i, t| conv2d_valid_s2(t, &kernels[i], &weights.conv[i].bias),
        |v| dense_f32(&dense_kernel, weights.dense.bias, v),
    )
}

pub fn forward(features: &MfccMatrix, weights: &ModelWeights) -> Result<InferenceResult, CnnError> {
    forward_layers(features, weights, &ARCHITECTURE, false)
}

/// Forward pass that keeps every intermediate activation.
pub fn forward_traced(features: &MfccMatrix, weights: &ModelWeights) -> Result<InferenceResult, CnnError> {
    forward_layers(features, weights, &ARCHITECTURE, true)
}
