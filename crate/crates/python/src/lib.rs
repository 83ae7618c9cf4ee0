//! Python bindings: `import coughwatch`.

use std::fs;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use coughwatch_core as core;
use core::events::{ConsolidationParams, SegmentVerdict};
use core::mfcc::MfccConfig;
use core::preprocess::OnsetPeak;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyfunction]
fn hz_to_mel(f: f64) -> PyResult<f64> {
    core::hz_to_mel(f).map_err(value_err)
}

#[pyfunction]
fn mel_to_hz(m: f64) -> PyResult<f64> {
    core::mel_to_hz(m).map_err(value_err)
}

/// Samples of a 16 kHz mono PCM16 WAV file as floats in [-1, 1).
#[pyfunction]
fn read_wav(path: &str) -> PyResult<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| PyIOError::new_err(format!("{path}: {e}")))?;
    Ok(core::parse_wav(&bytes).map_err(value_err)?.samples)
}

#[pyfunction]
fn encode_wav<'py>(py: Python<'py>, samples: Vec<f64>) -> Bound<'py, PyBytes> {
    PyBytes::new(py, &core::encode_wav(&samples))
}

/// MFCC matrix (`n_mfcc` rows of `n_frames`) for each one-second segment of
/// `samples`. With `condition`, AGC and the band-pass run first.
#[pyfunction]
#[pyo3(signature = (samples, frame_ms=5, overlap_pct=25, condition=true))]
fn mfcc(samples: Vec<f64>, frame_ms: u32, overlap_pct: u32, condition: bool) -> PyResult<Vec<Vec<Vec<f32>>>> {
    let extractor = core::MfccExtractor::new(MfccConfig::new(frame_ms, overlap_pct)).map_err(value_err)?;
    let pre = core::Preprocessor::new(Default::default()).map_err(value_err)?;
    let stream = core::AudioStream::from_samples(samples);
    core::segment(&stream)
        .map_err(value_err)?
        .iter()
        .map(|seg| {
            let seg = if condition { pre.condition(seg) } else { seg.clone() };
            let m = extractor.mfcc(&seg).map_err(value_err)?;
            Ok(m.rows().map(<[f32]>::to_vec).collect())
        })
        .collect()
}

fn matrix(rows: Vec<Vec<f32>>) -> PyResult<core::MfccMatrix> {
    let n_mfcc = rows.len();
    let n_frames = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != n_frames) {
        return Err(value_err("feature rows differ in length"));
    }
    let mut m = core::MfccMatrix::zeros(n_mfcc, n_frames);
    m.coefficients = rows.into_iter().flatten().collect();
    Ok(m)
}

/// Detector weights in float or int8 form.
#[pyclass(name = "Weights", module = "coughwatch", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyWeights {
    inner: core::ModelWeights,
}

#[pymethods]
impl PyWeights {
    /// Untrained weights from a seeded generator.
    #[staticmethod]
    #[pyo3(signature = (seed, n_frames=267, dense_bias=None))]
    fn seeded(seed: u64, n_frames: usize, dense_bias: Option<f32>) -> Self {
        let mut inner = core::ModelWeights::seeded(seed, (40, n_frames));
        if let Some(b) = dense_bias {
            inner.dense.bias = b;
        }
        Self { inner }
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(Self { inner: core::ModelWeights::from_bytes(data).map_err(value_err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let bytes = fs::read(path).map_err(|e| PyIOError::new_err(format!("{path}: {e}")))?;
        Self::from_bytes(&bytes)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.to_bytes())
    }

    fn save(&self, path: &str) -> PyResult<()> {
        fs::write(path, self.inner.to_bytes()).map_err(|e| PyIOError::new_err(format!("{path}: {e}")))
    }

    fn quantize(&self) -> Self {
        Self { inner: core::quantize_model(&self.inner) }
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn payload_bytes(&self) -> usize {
        self.inner.payload_bytes()
    }

    #[getter]
    fn is_quantized(&self) -> bool {
        self.inner.is_quantized()
    }

    #[getter]
    fn input_shape(&self) -> (usize, usize) {
        self.inner.input_shape
    }

    /// Probability for one feature matrix given as a list of rows.
    fn predict(&self, features: Vec<Vec<f32>>) -> PyResult<f32> {
        let m = matrix(features)?;
        let r = if self.inner.is_quantized() {
            core::forward_quantized(&m, &self.inner).map_err(value_err)?
        } else {
            core::forward(&m, &self.inner).map_err(value_err)?
        };
        Ok(r.probability)
    }

    /// Output shape of every layer for a zero input.
    fn layer_shapes(&self) -> PyResult<Vec<(String, Vec<usize>)>> {
        let (h, w) = self.inner.input_shape;
        let r = core::forward_traced(&core::MfccMatrix::zeros(h, w), &self.inner).map_err(value_err)?;
        Ok(r.layer_activations
            .unwrap_or_default()
            .into_iter()
            .map(|(l, a)| (format!("{l:?}"), a.shape()))
            .collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "Weights(input_shape={:?}, quantized={}, params={})",
            self.inner.input_shape,
            self.inner.is_quantized(),
            self.inner.param_count()
        )
    }
}

/// Full detection pipeline.
#[pyclass(name = "Detector", module = "coughwatch", frozen)]
struct PyDetector {
    inner: core::Pipeline,
}

#[pymethods]
impl PyDetector {
    /// `config` is the flat `key = value` text accepted by the CLI.
    #[new]
    #[pyo3(signature = (weights, config=None))]
    fn new(weights: &PyWeights, config: Option<&str>) -> PyResult<Self> {
        let cfg = match config {
            Some(text) => core::PipelineConfig::from_text(text).map_err(value_err)?,
            None => core::PipelineConfig::default(),
        };
        Ok(Self { inner: core::Pipeline::new(cfg, weights.inner.clone()).map_err(value_err)? })
    }

    /// Event report JSON for a WAV file.
    fn detect_file(&self, path: &str) -> PyResult<String> {
        let f = fs::File::open(path).map_err(|e| PyIOError::new_err(format!("{path}: {e}")))?;
        let r = self.inner.detect(std::io::BufReader::new(f), path).map_err(value_err)?;
        Ok(r.to_json())
    }

    /// Event report JSON for WAV bytes held in memory.
    #[pyo3(signature = (data, source="<bytes>"))]
    fn detect_bytes(&self, data: &[u8], source: &str) -> PyResult<String> {
        Ok(self.inner.detect(data, source).map_err(value_err)?.to_json())
    }

    #[getter]
    fn config_text(&self) -> String {
        self.inner.config().to_text()
    }
}

/// The memory table as CSV: every reference row, or one configuration.
#[pyfunction]
#[pyo3(signature = (frame_ms=None, overlap_pct=None, scratch_kb=core::budget::DEFAULT_SCRATCH_KB))]
fn budget_table(frame_ms: Option<u32>, overlap_pct: Option<u32>, scratch_kb: f64) -> PyResult<String> {
    let configs: Vec<MfccConfig> = match (frame_ms, overlap_pct) {
        (None, None) => MfccConfig::table_rows().collect(),
        (f, o) => vec![MfccConfig::new(f.unwrap_or(5), o.unwrap_or(25))],
    };
    for c in &configs {
        c.validate().map_err(value_err)?;
    }
    let rows: Vec<_> = configs.iter().map(|c| core::mfcc_budget(c, scratch_kb)).collect();
    Ok(core::budget::render_csv(&rows))
}

/// Sensitivity, specificity, PPV, NPV and F1; `None` where undefined.
#[pyfunction]
#[pyo3(name = "metrics")]
fn py_metrics<'py>(py: Python<'py>, tp: u64, tn: u64, fp: u64, fn_: u64) -> PyResult<Bound<'py, PyDict>> {
    let r = core::metrics(core::ConfusionCounts::new(tp, tn, fp, fn_));
    let d = PyDict::new(py);
    d.set_item("sensitivity", r.sensitivity)?;
    d.set_item("specificity", r.specificity)?;
    d.set_item("ppv", r.ppv)?;
    d.set_item("npv", r.npv)?;
    d.set_item("f1", r.f1)?;
    Ok(d)
}

/// Merges `(segment_index, probability, onset_times)` verdicts into events
/// `(start_s, end_s, confidence, merged_segment_count)`.
#[pyfunction]
#[pyo3(signature = (verdicts, threshold=0.5, merge_window_s=0.4, tail_s=0.45))]
fn consolidate(
    verdicts: Vec<(usize, f64, Vec<f64>)>,
    threshold: f64,
    merge_window_s: f64,
    tail_s: f64,
) -> PyResult<Vec<(f64, f64, f64, usize)>> {
    let verdicts: Vec<SegmentVerdict> = verdicts
        .into_iter()
        .map(|(segment_index, probability, onsets)| SegmentVerdict {
            segment_index,
            probability,
            onset_peaks: onsets.into_iter().map(|t| OnsetPeak { time_s: t, strength: 1.0 }).collect(),
        })
        .collect();
    let params = ConsolidationParams { threshold, merge_window_s, tail_s };
    Ok(core::consolidate(&verdicts, params)
        .map_err(value_err)?
        .into_iter()
        .map(|e| (e.start_s, e.end_s, e.confidence, e.merged_segment_count))
        .collect())
}

#[pymodule]
fn coughwatch(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(hz_to_mel, m)?)?;
    m.add_function(wrap_pyfunction!(mel_to_hz, m)?)?;
    m.add_function(wrap_pyfunction!(read_wav, m)?)?;
    m.add_function(wrap_pyfunction!(encode_wav, m)?)?;
    m.add_function(wrap_pyfunction!(mfcc, m)?)?;
    m.add_function(wrap_pyfunction!(budget_table, m)?)?;
    m.add_function(wrap_pyfunction!(py_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(consolidate, m)?)?;
    m.add_class::<PyWeights>()?;
    m.add_class::<PyDetector>()?;
    Ok(())
}
