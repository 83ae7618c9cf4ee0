//! Network weights and the `CGHW` weight file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CGHW"            4 bytes magic
//! version           u32 (currently 1)
//! record count      u32
//! per record:
//!   name length     u8, then UTF-8 name ("conv2/kernel", "bn/epsilon", ...)
//!   dtype           u8 (0 = f32, 1 = i8)
//!   rank            u8, then rank x u32 dims
//!   data            product(dims) elements (f32 LE or i8)
//!   if i8:          f32 scale, i32 zero point
//! crc32             u32 over every preceding byte
//! ```
//!
//! Kernels use the HWIO layout `[kh][kw][in][out]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::quantize::QuantizedTensor;

pub const MAGIC: &[u8; 4] = b"CGHW";
pub const FORMAT_VERSION: u32 = 1;

/// Kernel side length for every convolution.
pub const KERNEL_SIZE: usize = 3;
/// Filters per convolution layer.
pub const CONV_FILTERS: [usize; 3] = [16, 32, 40];
pub const CONV_NAMES: [&str; 3] = ["conv1", "conv2", "conv3"];
pub const DEFAULT_INPUT: (usize, usize) = (40, 267);

const DTYPE_F32: u8 = 0;
const DTYPE_I8: u8 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum WeightsError {
    #[error("not a CGHW weight file (bad magic)")]
    BadMagic,
    #[error("unsupported weight format version {0}")]
    UnsupportedVersion(u32),
    #[error("weight file is truncated")]
    TruncatedFile,
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("shape mismatch in layer {layer}: {detail}")]
    ShapeMismatch { layer: String, detail: String },
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error("invalid tensor {name}: {detail}")]
    InvalidTensor { name: String, detail: String },
}

impl WeightsError {
    fn shape(layer: &str, detail: impl Into<String>) -> Self {
        Self::ShapeMismatch { layer: layer.to_string(), detail: detail.into() }
    }
}

/// A weight tensor stored either in float or as symmetric int8.
#[derive(Debug, Clone, PartialEq)]
pub enum Kernel {
    F32(Vec<f32>),
    I8(QuantizedTensor),
}

impl Kernel {
    pub fn len(&self) -> usize {
        match self {
            Kernel::F32(v) => v.len(),
            Kernel::I8(q) => q.values.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_quantized(&self) -> bool {
        matches!(self, Kernel::I8(_))
    }

    /// Float view of the kernel (dequantized if needed).
    pub fn to_f32(&self) -> Vec<f32> {
        match self {
            Kernel::F32(v) => v.clone(),
            Kernel::I8(q) => q.dequantize(),
        }
    }

    /// Bytes this kernel occupies in a weight file payload.
    pub fn payload_bytes(&self) -> usize {
        match self {
            Kernel::F32(v) => v.len() * 4,
            Kernel::I8(q) => q.values.len() + 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub filters: usize,
    /// `[3][3][in_channels][filters]`
    pub kernel: Kernel,
    pub bias: Vec<f32>,
}

impl ConvLayer {
    pub fn param_count(&self) -> usize {
        self.kernel.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub moving_mean: Vec<f32>,
    pub moving_var: Vec<f32>,
    pub epsilon: f32,
}

impl BatchNorm {
    pub fn identity(n: usize) -> Self {
        Self {
            gamma: vec![1.0; n],
            beta: vec![0.0; n],
            moving_mean: vec![0.0; n],
            moving_var: vec![1.0; n],
            epsilon: 0.0,
        }
    }

    /// Trainable (gamma, beta) plus non-trainable (moving statistics).
    pub fn param_count(&self) -> usize {
        self.gamma.len() * 4
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `[inputs][1]`
    pub kernel: Kernel,
    pub bias: f32,
}

/// All parameters of the three-convolution detector, plus the feature shape
/// it was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub conv: [ConvLayer; 3],
    pub bn: BatchNorm,
    pub dense: Dense,
    /// `(n_mfcc, n_frames)` of the input feature image (one channel).
    pub input_shape: (usize, usize),
}

/// Parameter counts split the way a Keras summary reports them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCounts {
    pub conv: [usize; 3],
    pub batch_norm: usize,
    pub dense: usize,
    pub trainable: usize,
    pub non_trainable: usize,
    pub total: usize,
}

impl ModelWeights {
    /// Untrained weights drawn from a seeded generator: Glorot-uniform
    /// kernels, small biases and a mildly perturbed batch norm. Used for
    /// fixtures and smoke tests.
    pub fn seeded(seed: u64, input_shape: (usize, usize)) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |n: usize, lo: f32, hi: f32| -> Vec<f32> { (0..n).map(|_| rng.gen_range(lo..hi)).collect() };

        let mut in_ch = 1;
        let conv = CONV_FILTERS.map(|filters| {
            let fan_in = KERNEL_SIZE * KERNEL_SIZE * in_ch;
            let fan_out = KERNEL_SIZE * KERNEL_SIZE * filters;
            let limit = (6.0 / (fan_in + fan_out) as f32).sqrt();
            let layer = ConvLayer {
                in_channels: in_ch,
                filters,
                kernel: Kernel::F32(uniform(fan_in * filters, -limit, limit)),
                bias: uniform(filters, -0.05, 0.05),
            };
            in_ch = filters;
            layer
        });
        let n = CONV_FILTERS[2];
        let bn = BatchNorm {
            gamma: uniform(n, 0.8, 1.2),
            beta: uniform(n, -0.1, 0.1),
            moving_mean: uniform(n, 0.0, 0.5),
            moving_var: uniform(n, 0.5, 1.5),
            epsilon: 1e-3,
        };
        let limit = (6.0 / (n + 1) as f32).sqrt();
        let dense = Dense { kernel: Kernel::F32(uniform(n, -limit, limit)), bias: 0.0 };
        Self { conv, bn, dense, input_shape }
    }

    /// Every tensor zero, batch norm the identity.
    pub fn zeros(input_shape: (usize, usize)) -> Self {
        let mut w = Self::seeded(0, input_shape);
        for c in &mut w.conv {
            c.kernel = Kernel::F32(vec![0.0; c.kernel.len()]);
            c.bias.iter_mut().for_each(|b| *b = 0.0);
        }
        w.bn = BatchNorm::identity(CONV_FILTERS[2]);
        w.dense = Dense { kernel: Kernel::F32(vec![0.0; CONV_FILTERS[2]]), bias: 0.0 };
        w
    }

    pub fn param_counts(&self) -> ParamCounts {
        let conv = [0, 1, 2].map(|i| self.conv[i].param_count());
        let batch_norm = self.bn.param_count();
        let dense = self.dense.kernel.len() + 1;
        let non_trainable = self.bn.moving_mean.len() + self.bn.moving_var.len();
        let total = conv.iter().sum::<usize>() + batch_norm + dense;
        ParamCounts { conv, batch_norm, dense, trainable: total - non_trainable, non_trainable, total }
    }

    pub fn param_count(&self) -> usize {
        self.param_counts().total
    }

    pub fn is_quantized(&self) -> bool {
        self.conv.iter().any(|c| c.kernel.is_quantized()) || self.dense.kernel.is_quantized()
    }

    /// Bytes of parameter data a weight file carries: kernels in their
    /// stored dtype (with scale and zero point for int8) and every bias and
    /// batch-norm value as f32. File framing and metadata are excluded.
    pub fn payload_bytes(&self) -> usize {
        let conv: usize = self.conv.iter().map(|c| c.kernel.payload_bytes() + c.bias.len() * 4).sum();
        conv + self.bn.param_count() * 4 + self.dense.kernel.payload_bytes() + 4
    }

    /// Checks every tensor against the architecture.
    pub fn validate(&self) -> Result<(), WeightsError> {
        let mut in_ch = 1;
        for (i, layer) in self.conv.iter().enumerate() {
            let name = CONV_NAMES[i];
            let filters = CONV_FILTERS[i];
            if layer.in_channels != in_ch || layer.filters != filters {
                return Err(WeightsError::shape(
                    name,
                    format!("expected {in_ch} -> {filters} channels, got {} -> {}", layer.in_channels, layer.filters),
                ));
            }
            let want = KERNEL_SIZE * KERNEL_SIZE * in_ch * filters;
            if layer.kernel.len() != want {
                return Err(WeightsError::shape(name, format!("kernel has {} values, expected {want}", layer.kernel.len())));
            }
            if layer.bias.len() != filters {
                return Err(WeightsError::shape(name, format!("bias has {} values, expected {filters}", layer.bias.len())));
            }
            in_ch = filters;
        }
        let n = CONV_FILTERS[2];
        for (label, v) in [
            ("gamma", &self.bn.gamma),
            ("beta", &self.bn.beta),
            ("moving_mean", &self.bn.moving_mean),
            ("moving_var", &self.bn.moving_var),
        ] {
            if v.len() != n {
                return Err(WeightsError::shape("bn", format!("{label} has {} values, expected {n}", v.len())));
            }
        }
        if let Some(bad) = self.bn.moving_var.iter().find(|v| v.is_nan() || **v < 0.0) {
            return Err(WeightsError::InvalidTensor {
                name: "bn/moving_var".into(),
                detail: format!("negative or NaN variance {bad}"),
            });
        }
        if self.dense.kernel.len() != n {
            return Err(WeightsError::shape("dense", format!("kernel has {} values, expected {n}", self.dense.kernel.len())));
        }
        if self.input_shape.0 == 0 || self.input_shape.1 == 0 {
            return Err(WeightsError::shape("input", format!("{:?}", self.input_shape)));
        }
        Ok(())
    }

    pub fn to_records(&self) -> Vec<Record> {
        let mut out = vec![Record::f32(
            "input_shape",
            vec![3],
            vec![self.input_shape.0 as f32, self.input_shape.1 as f32, 1.0],
        )];
        for (i, c) in self.conv.iter().enumerate() {
            let name = CONV_NAMES[i];
            let dims = vec![KERNEL_SIZE as u32, KERNEL_SIZE as u32, c.in_channels as u32, c.filters as u32];
            out.push(Record::kernel(format!("{name}/kernel"), dims, &c.kernel));
            out.push(Record::f32(format!("{name}/bias"), vec![c.filters as u32], c.bias.clone()));
        }
        let n = self.bn.gamma.len() as u32;
        out.push(Record::f32("bn/gamma", vec![n], self.bn.gamma.clone()));
        out.push(Record::f32("bn/beta", vec![n], self.bn.beta.clone()));
        out.push(Record::f32("bn/moving_mean", vec![n], self.bn.moving_mean.clone()));
        out.push(Record::f32("bn/moving_var", vec![n], self.bn.moving_var.clone()));
        out.push(Record::f32("bn/epsilon", vec![1], vec![self.bn.epsilon]));
        out.push(Record::kernel("dense/kernel", vec![self.dense.kernel.len() as u32, 1], &self.dense.kernel));
        out.push(Record::f32("dense/bias", vec![1], vec![self.dense.bias]));
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode_records(&self.to_records())
    }

    pub fn from_records(records: Vec<Record>) -> Result<Self, WeightsError> {
        let mut table: std::collections::HashMap<String, Record> =
            records.into_iter().map(|r| (r.name.clone(), r)).collect();
        let mut take = |name: &str| table.remove(name).ok_or_else(|| WeightsError::MissingTensor(name.into()));

        let shape = take("input_shape")?.expect_f32(&[3], "input")?;
        if shape.iter().any(|v| v.fract() != 0.0 || *v < 1.0) || shape[2] != 1.0 {
            return Err(WeightsError::shape("input", format!("{shape:?}")));
        }
        let input_shape = (shape[0] as usize, shape[1] as usize);

        let mut in_ch = 1;
        let mut convs = Vec::with_capacity(3);
        for (i, name) in CONV_NAMES.iter().enumerate() {
            let filters = CONV_FILTERS[i];
            let dims = [KERNEL_SIZE as u32, KERNEL_SIZE as u32, in_ch as u32, filters as u32];
            let kernel = take(&format!("{name}/kernel"))?.expect_kernel(&dims, name)?;
            let bias = take(&format!("{name}/bias"))?.expect_f32(&[filters as u32], name)?;
            convs.push(ConvLayer { in_channels: in_ch, filters, kernel, bias });
            in_ch = filters;
        }
        let n = CONV_FILTERS[2] as u32;
        let bn = BatchNorm {
            gamma: take("bn/gamma")?.expect_f32(&[n], "bn")?,
            beta: take("bn/beta")?.expect_f32(&[n], "bn")?,
            moving_mean: take("bn/moving_mean")?.expect_f32(&[n], "bn")?,
            moving_var: take("bn/moving_var")?.expect_f32(&[n], "bn")?,
            epsilon: take("bn/epsilon")?.expect_f32(&[1], "bn")?[0],
        };
        let dense = Dense {
            kernel: take("dense/kernel")?.expect_kernel(&[n, 1], "dense")?,
            bias: take("dense/bias")?.expect_f32(&[1], "dense")?[0],
        };
        let conv: [ConvLayer; 3] = convs.try_into().expect("three conv layers");
        let w = Self { conv, bn, dense, input_shape };
        w.validate()?;
        Ok(w)
    }

    /// Parses and shape-checks a weight file.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WeightsError> {
        Self::from_records(decode_records(bytes)?)
    }
}

/// Alias matching the operation name used by the CLI and bindings.
pub fn load_weights(bytes: &[u8]) -> Result<ModelWeights, WeightsError> {
    ModelWeights::from_bytes(bytes)
}

#[derive(Debug, Clone, PartialEq)]
pub enum RecordData {
    F32(Vec<f32>),
    I8 { values: Vec<i8>, scale: f32, zero_point: i32 },
}

/// One named tensor as it appears in the file.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: RecordData,
}

impl Record {
    pub fn f32(name: impl Into<String>, dims: Vec<u32>, values: Vec<f32>) -> Self {
        Self { name: name.into(), dims, data: RecordData::F32(values) }
    }

    fn kernel(name: impl Into<String>, dims: Vec<u32>, k: &Kernel) -> Self {
        let data = match k {
            Kernel::F32(v) => RecordData::F32(v.clone()),
            Kernel::I8(q) => RecordData::I8 { values: q.values.clone(), scale: q.scale, zero_point: q.zero_point },
        };
        Self { name: name.into(), dims, data }
    }

    fn check_dims(&self, dims: &[u32], layer: &str) -> Result<(), WeightsError> {
        if self.dims != dims {
            return Err(WeightsError::shape(layer, format!("{} has dims {:?}, expected {:?}", self.name, self.dims, dims)));
        }
        Ok(())
    }

    fn expect_f32(self, dims: &[u32], layer: &str) -> Result<Vec<f32>, WeightsError> {
        self.check_dims(dims, layer)?;
        match self.data {
            RecordData::F32(v) => Ok(v),
            RecordData::I8 { .. } => Err(WeightsError::InvalidTensor { name: self.name, detail: "must be stored as f32".into() }),
        }
    }

    fn expect_kernel(self, dims: &[u32], layer: &str) -> Result<Kernel, WeightsError> {
        self.check_dims(dims, layer)?;
        Ok(match self.data {
            RecordData::F32(v) => Kernel::F32(v),
            RecordData::I8 { values, scale, zero_point } => {
                if !(scale > 0.0 && scale.is_finite()) || !(-128..=127).contains(&zero_point) {
                    return Err(WeightsError::InvalidTensor {
                        name: self.name,
                        detail: format!("bad quantization parameters scale={scale} zero_point={zero_point}"),
                    });
                }
                Kernel::I8(QuantizedTensor {
                    values,
                    scale,
                    zero_point,
                    shape: dims.iter().map(|&d| d as usize).collect(),
                })
            }
        })
    }
}

pub fn encode_records(records: &[Record]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        let name = r.name.as_bytes();
        out.push(u8::try_from(name.len()).expect("tensor name under 256 bytes"));
        out.extend_from_slice(name);
        out.push(match r.data {
            RecordData::F32(_) => DTYPE_F32,
            RecordData::I8 { .. } => DTYPE_I8,
        });
        out.push(r.dims.len() as u8);
        for d in &r.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &r.data {
            RecordData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            RecordData::I8 { values, scale, zero_point } => {
                out.extend(values.iter().map(|&q| q as u8));
                out.extend_from_slice(&scale.to_le_bytes());
                out.extend_from_slice(&zero_point.to_le_bytes());
            }
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WeightsError> {
        let end = self.pos.checked_add(n).ok_or(WeightsError::TruncatedFile)?;
        let s = self.bytes.get(self.pos..end).ok_or(WeightsError::TruncatedFile)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, WeightsError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, WeightsError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, WeightsError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_records(bytes: &[u8]) -> Result<Vec<Record>, WeightsError> {
    if bytes.len() < 4 {
        return Err(WeightsError::TruncatedFile);
    }
    if &bytes[..4] != MAGIC {
        return Err(WeightsError::BadMagic);
    }
    let mut cur = Cursor { bytes, pos: 4 };
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(WeightsError::UnsupportedVersion(version));
    }
    let count = cur.u32()?;
    let mut records = Vec::new();
    for _ in 0..count {
        let name_len = cur.u8()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| WeightsError::InvalidTensor { name: "?".into(), detail: "name is not UTF-8".into() })?
            .to_string();
        let dtype = cur.u8()?;
        let rank = cur.u8()? as usize;
        let dims = (0..rank).map(|_| cur.u32()).collect::<Result<Vec<_>, _>>()?;
        let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d as usize)).ok_or(WeightsError::TruncatedFile)?;
        let data = match dtype {
            DTYPE_F32 => {
                let raw = cur.take(n.checked_mul(4).ok_or(WeightsError::TruncatedFile)?)?;
                RecordData::F32(raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect())
            }
            DTYPE_I8 => {
                let values = cur.take(n)?.iter().map(|&b| b as i8).collect();
                let scale = cur.f32()?;
                let zero_point = cur.u32()? as i32;
                RecordData::I8 { values, scale, zero_point }
            }
            other => {
                return Err(WeightsError::InvalidTensor { name, detail: format!("unknown dtype {other}") });
            }
        };
        records.push(Record { name, dims, data });
    }
    let body_end = cur.pos;
    let stored = cur.u32()?;
    if cur.pos != bytes.len() {
        return Err(WeightsError::InvalidTensor {
            name: "<file>".into(),
            detail: format!("{} trailing bytes after checksum", bytes.len() - cur.pos),
        });
    }
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(WeightsError::ChecksumMismatch { stored, computed });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_model_round_trips() {
        let w = ModelWeights::seeded(7, DEFAULT_INPUT);
        let bytes = w.to_bytes();
        let back = ModelWeights::from_bytes(&bytes).unwrap();
        assert_eq!(back, w);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn parameter_totals() {
        let c = ModelWeights::seeded(1, DEFAULT_INPUT).param_counts();
        assert_eq!(c.conv, [160, 4640, 11560]);
        assert_eq!(c.batch_norm, 160);
        assert_eq!(c.dense, 41);
        assert_eq!(c.total, 16561);
        assert_eq!(c.trainable, 16481);
        assert_eq!(c.non_trainable, 80);
    }

    #[test]
    fn conv2_shape_mismatch_is_named() {
        let w = ModelWeights::seeded(3, DEFAULT_INPUT);
        let mut records = w.to_records();
        let k = records.iter_mut().find(|r| r.name == "conv2/kernel").unwrap();
        k.dims = vec![3, 3, 16, 31];
        k.data = RecordData::F32(vec![0.0; 3 * 3 * 16 * 31]);
        let err = ModelWeights::from_bytes(&encode_records(&records)).unwrap_err();
        match err {
            WeightsError::ShapeMismatch { ref layer, .. } => assert_eq!(layer, "conv2"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn framing_errors() {
        assert_eq!(ModelWeights::from_bytes(&[]), Err(WeightsError::TruncatedFile));
        assert_eq!(ModelWeights::from_bytes(b"NOPE\x01\0\0\0"), Err(WeightsError::BadMagic));
        let bytes = ModelWeights::seeded(3, DEFAULT_INPUT).to_bytes();
        assert_eq!(ModelWeights::from_bytes(&bytes[..bytes.len() - 10]), Err(WeightsError::TruncatedFile));
        let mut flipped = bytes.clone();
        flipped[100] ^= 0x40;
        assert!(matches!(ModelWeights::from_bytes(&flipped), Err(WeightsError::ChecksumMismatch { .. })));
        let mut v2 = bytes;
        v2[4] = 2;
        assert_eq!(ModelWeights::from_bytes(&v2), Err(WeightsError::UnsupportedVersion(2)));
    }

    #[test]
    fn missing_and_invalid_tensors() {
        let w = ModelWeights::seeded(3, DEFAULT_INPUT);
        let records: Vec<_> = w.to_records().into_iter().filter(|r| r.name != "bn/beta").collect();
        assert_eq!(
            ModelWeights::from_bytes(&encode_records(&records)),
            Err(WeightsError::MissingTensor("bn/beta".into()))
        );
        let mut bad = w.clone();
        bad.bn.moving_var[0] = -1.0;
        assert!(matches!(ModelWeights::from_bytes(&bad.to_bytes()), Err(WeightsError::InvalidTensor { .. })));
    }

    #[test]
    fn float_payload_size() {
        let w = ModelWeights::seeded(3, DEFAULT_INPUT);
        assert_eq!(w.payload_bytes(), 16561 * 4);
    }
}
