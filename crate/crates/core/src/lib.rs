//! Cough detection for constrained devices.
//!
//! Audio is read as 16 kHz mono PCM16 and cut into one-second segments.
//! Each segment is leveled, band-passed and checked for acoustic onsets;
//! segments with an onset are turned into a 40-coefficient MFCC image and
//! scored by a three-layer CNN. Positive segments become timestamped events.
//!
//! ```no_run
//! use coughwatch_core::{Pipeline, PipelineConfig, ModelWeights};
//!
//! let weights = ModelWeights::from_bytes(&std::fs::read("model.cghw")?)?;
//! let pipeline = Pipeline::new(PipelineConfig::default(), weights)?;
//! let report = pipeline.detect(std::fs::File::open("clip.wav")?, "clip.wav")?;
//! print!("{}", report.to_json());
//! # Ok::<(), Box<dyn std::error::Error>>(())
//! ```

pub mod audio;
pub mod budget;
pub mod cnn;
pub mod config;
pub mod events;
pub mod metrics;
pub mod mfcc;
pub mod pipeline;
pub mod preprocess;
pub mod quantize;
pub mod synth;
pub mod weights;

use thiserror::Error;

pub use audio::{encode_wav, parse_wav, segment, AudioSegment, AudioStream, SegmentReader, WavError};
pub use budget::{mfcc_budget, model_budget, BudgetReport, FeatureBudget, ModelBudget, NetworkShape};
pub use cnn::{forward, forward_traced, CnnError, InferenceResult, Layer, Tensor3};
pub use config::{ConfigError, PipelineConfig};
pub use events::{consolidate, ConsolidationParams, Consolidator, CoughEvent, EventError, SegmentVerdict};
pub use metrics::{metrics, ConfusionCounts, EvalReport, Label, MetricsError};
pub use mfcc::{hz_to_mel, mel_to_hz, MfccConfig, MfccError, MfccExtractor, MfccMatrix};
pub use pipeline::{EventReport, Pipeline};
pub use preprocess::{OnsetPeak, PreprocessConfig, PreprocessError, Preprocessor};
pub use quantize::{forward_quantized, quantize_model, quantize_tensor, QuantizeError, QuantizedTensor};
pub use weights::{ModelWeights, WeightsError};

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Wav(#[from] WavError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Mfcc(#[from] MfccError),
    #[error(transparent)]
    Weights(#[from] WeightsError),
    #[error(transparent)]
    Cnn(#[from] CnnError),
    #[error(transparent)]
    Quantize(#[from] QuantizeError),
    #[error(transparent)]
    Event(#[from] EventError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("feature shape {features:?} does not match the weights' input shape {weights:?}")]
    InputShape { features: (usize, usize), weights: (usize, usize) },
    #[error("segment {index} (offset {offset_s} s): {source}")]
    AtSegment {
        index: usize,
        offset_s: f64,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn at_segment(index: usize, source: Error) -> Self {
        Error::AtSegment { index, offset_s: index as f64, source: Box::new(source) }
    }
}
