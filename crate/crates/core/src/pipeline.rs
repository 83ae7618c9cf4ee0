//! End-to-end detection: segment, condition, gate on onsets, featurize,
//! classify, consolidate.

use std::io::Read;

use serde::Serialize;

use crate::audio::{AudioSegment, SegmentReader};
use crate::cnn;
use crate::config::PipelineConfig;
use crate::events::{CoughEvent, Consolidator, SegmentVerdict};
use crate::mfcc::{MfccExtractor, MfccMatrix};
use crate::preprocess::Preprocessor;
use crate::quantize;
use crate::weights::ModelWeights;
use crate::Error;

/// Result of running the detector over one stream.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EventReport {
    pub source: String,
    pub config_fingerprint: String,
    pub segment_count: usize,
    pub events: Vec<CoughEvent>,
}

impl EventReport {
    /// Pretty JSON with a trailing newline. Field order is fixed, so equal
    /// reports serialize to identical bytes.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone)]
pub struct Pipeline {
    config: PipelineConfig,
    preprocessor: Preprocessor,
    extractor: MfccExtractor,
    weights: ModelWeights,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, weights: ModelWeights) -> Result<Self, Error> {
        config.validate()?;
        weights.validate()?;
        let extractor = MfccExtractor::new(config.mfcc.clone())?;
        let features = (config.mfcc.n_mfcc, config.mfcc.n_frames());
        if features != weights.input_shape {
            return Err(Error::InputShape { features, weights: weights.input_shape });
        }
        let preprocessor = Preprocessor::new(config.preprocess.clone())?;
        Ok(Self { config, preprocessor, extractor, weights })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn extractor(&self) -> &MfccExtractor {
        &self.extractor
    }

    pub fn preprocessor(&self) -> &Preprocessor {
        &self.preprocessor
    }

    /// MFCC of the conditioned segment, as fed to the network.
    pub fn features(&self, segment: &AudioSegment) -> Result<MfccMatrix, Error> {
        Ok(self.extractor.mfcc(&self.preprocessor.condition(segment))?)
    }

    /// Network probability for a feature matrix, using the int8 path when
    /// the weights are quantized.
    pub fn classify(&self, features: &MfccMatrix) -> Result<f32, Error> {
        Ok(if self.weights.is_quantized() {
            quantize::forward_quantized(features, &self.weights)?.probability
        } else {
            cnn::forward(features, &self.weights)?.probability
        })
    }

    /// Verdict for one segment. Segments without an onset peak are scored 0
    /// and never reach the network.
    pub fn analyze(&self, segment: &AudioSegment) -> Result<SegmentVerdict, Error> {
        let conditioned = self.preprocessor.condition(segment);
        let onset_peaks = self.preprocessor.onsets(&conditioned, &self.extractor);
        let probability = if onset_peaks.is_empty() {
            0.0
        } else {
            let features = self.extractor.mfcc(&conditioned)?;
            f64::from(self.classify(&features)?)
        };
        Ok(SegmentVerdict { segment_index: segment.index, probability, onset_peaks })
    }

    /// Streams a WAV from `reader`, holding one segment at a time, and
    /// returns the consolidated events.
    pub fn detect<R: Read>(&self, reader: R, source: &str) -> Result<EventReport, Error> {
        let mut consolidator = Consolidator::new(self.config.consolidation());
        let mut events = Vec::new();
        let mut segment_count = 0;
        for seg in SegmentReader::new(reader)? {
            let seg = seg.map_err(|e| Error::at_segment(segment_count, e.into()))?;
            let verdict = self.analyze(&seg).map_err(|e| Error::at_segment(seg.index, e))?;
            events.extend(consolidator.push(&verdict)?);
            segment_count += 1;
        }
        events.extend(consolidator.finish());
        Ok(EventReport {
            source: source.to_string(),
            config_fingerprint: self.config.fingerprint(),
            segment_count,
            events,
        })
    }
}
