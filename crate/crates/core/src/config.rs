//! Pipeline configuration and its flat `key = value` text form.
//!
//! ```text
//! # lines starting with '#' are comments
//! preprocess.band_low_hz = 150
//! mfcc.frame_length_ms = 5
//! weights_path = model.cghw
//! ```
//!
//! Unknown keys are errors. Keys left out keep their defaults. Floats are
//! written in shortest round-trip form, so a dumped file reloads to an
//! identical configuration.

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::events::ConsolidationParams;
use crate::mfcc::MfccConfig;
use crate::preprocess::PreprocessConfig;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineConfig {
    pub preprocess: PreprocessConfig,
    pub mfcc: MfccConfig,
    pub weights_path: Option<PathBuf>,
    pub decision_threshold: f64,
    pub merge_window_s: f64,
    pub tail_s: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let c = ConsolidationParams::default();
        Self {
            preprocess: PreprocessConfig::default(),
            mfcc: MfccConfig::default(),
            weights_path: None,
            decision_threshold: c.threshold,
            merge_window_s: c.merge_window_s,
            tail_s: c.tail_s,
        }
    }
}

impl PipelineConfig {
    pub fn consolidation(&self) -> ConsolidationParams {
        ConsolidationParams {
            threshold: self.decision_threshold,
            merge_window_s: self.merge_window_s,
            tail_s: self.tail_s,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.preprocess.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.mfcc.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.decision_threshold) {
            return Err(ConfigError::Invalid(format!("decision_threshold {} outside [0, 1]", self.decision_threshold)));
        }
        if !(self.merge_window_s >= 0.0 && self.tail_s >= 0.0) {
            return Err(ConfigError::Invalid("merge_window_s and tail_s must be non-negative".into()));
        }
        Ok(())
    }

    /// Assigns one `key = value` pair.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(v: &str) -> Result<T, String> {
            v.parse().map_err(|_| format!("cannot parse {v:?} as a number"))
        }
        match key {
            "preprocess.band_low_hz" => self.preprocess.band_low_hz = num(value)?,
            "preprocess.band_high_hz" => self.preprocess.band_high_hz = num(value)?,
            "preprocess.agc_target_rms" => self.preprocess.agc_target_rms = num(value)?,
            "preprocess.onset_threshold" => self.preprocess.onset_threshold = num(value)?,
            "preprocess.filter_order" => self.preprocess.filter_order = num(value)?,
            "mfcc.n_mfcc" => self.mfcc.n_mfcc = num(value)?,
            "mfcc.n_mel_filters" => self.mfcc.n_mel_filters = num(value)?,
            "mfcc.frame_length_ms" => self.mfcc.frame_length_ms = num(value)?,
            "mfcc.overlap_pct" => self.mfcc.overlap_pct = num(value)?,
            "mfcc.fmin_hz" => self.mfcc.fmin_hz = num(value)?,
            "mfcc.fmax_hz" => self.mfcc.fmax_hz = num(value)?,
            "weights_path" => self.weights_path = (!value.is_empty()).then(|| PathBuf::from(value)),
            "decision_threshold" => self.decision_threshold = num(value)?,
            "merge_window_s" => self.merge_window_s = num(value)?,
            "tail_s" => self.tail_s = num(value)?,
            other => return Err(format!("unknown key {other:?}")),
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Parse {
                line: i + 1,
                detail: format!("expected key = value, got {line:?}"),
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|detail| ConfigError::Parse { line: i + 1, detail })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let p = &self.preprocess;
        let m = &self.mfcc;
        let mut out = String::from("# coughwatch pipeline configuration\n");
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("preprocess.band_low_hz", p.band_low_hz.to_string());
        kv("preprocess.band_high_hz", p.band_high_hz.to_string());
        kv("preprocess.agc_target_rms", p.agc_target_rms.to_string());
        kv("preprocess.onset_threshold", p.onset_threshold.to_string());
        kv("preprocess.filter_order", p.filter_order.to_string());
        kv("mfcc.n_mfcc", m.n_mfcc.to_string());
        kv("mfcc.n_mel_filters", m.n_mel_filters.to_string());
        kv("mfcc.frame_length_ms", m.frame_length_ms.to_string());
        kv("mfcc.overlap_pct", m.overlap_pct.to_string());
        kv("mfcc.fmin_hz", m.fmin_hz.to_string());
        kv("mfcc.fmax_hz", m.fmax_hz.to_string());
        kv(
            "weights_path",
            self.weights_path.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        );
        kv("decision_threshold", self.decision_threshold.to_string());
        kv("merge_window_s", self.merge_window_s.to_string());
        kv("tail_s", self.tail_s.to_string());
        out
    }

    /// First 16 hex digits of the SHA-256 of everything except the weights
    /// path.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.weights_path = None;
        let digest = Sha256::digest(c.to_text().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
