//! Mel-scale conversion, triangular filterbank and MFCC extraction.
//!
//! Per frame: periodic Hann window, zero-pad to `fft_size`, power spectrum,
//! triangular mel filterbank, natural log floored at [`LOG_FLOOR`], then the
//! cosine transform
//!
//! ```text
//! mfcc_i = sqrt(2/N) * sum_{j=1..N} log(x_j) * cos(i*pi*(j - 0.5)/N),  i = 1..n_mfcc
//! ```
//!
//! where `N` is the number of mel filters. Coefficient 0 (plain log energy)
//! is not part of the output.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::{num_complex::Complex, Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{AudioSegment, SAMPLE_RATE_HZ, SEGMENT_LEN};

/// Energies are clamped to this value before taking the log.
pub const LOG_FLOOR: f64 = 1e-10;

const SAMPLES_PER_MS: u32 = SAMPLE_RATE_HZ / 1000;

#[derive(Debug, Error, PartialEq)]
pub enum MfccError {
    #[error("negative frequency {0} Hz")]
    NegativeFrequency(f64),
    #[error("negative mel value {0}")]
    NegativeMel(f64),
    #[error("invalid MFCC configuration: {0}")]
    InvalidConfig(String),
    #[error("fft_size {fft_size} gives {bins} spectrum bins, fewer than {filters} mel filters")]
    DegenerateFilter { fft_size: usize, bins: usize, filters: usize },
    #[error("segment has {got} samples, configuration expects {expected}")]
    ConfigMismatch { got: usize, expected: usize },
}

/// `m = 2595 * log10(1 + f / 700)`
pub fn hz_to_mel(f: f64) -> Result<f64, MfccError> {
    if f < 0.0 {
        return Err(MfccError::NegativeFrequency(f));
    }
    Ok(2595.0 * (1.0 + f / 700.0).log10())
}

/// `f = 700 * (10^(m / 2595) - 1)`
pub fn mel_to_hz(m: f64) -> Result<f64, MfccError> {
    if m < 0.0 {
        return Err(MfccError::NegativeMel(m));
    }
    Ok(700.0 * (10f64.powf(m / 2595.0) - 1.0))
}

/// Frame and filterbank parameters for one feature configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfccConfig {
    pub n_mfcc: usize,
    pub n_mel_filters: usize,
    pub frame_length_ms: u32,
    pub overlap_pct: u32,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self::new(5, 25)
    }
}

impl MfccConfig {
    /// The frame length / overlap pairs listed in the memory table, in order.
    pub const TABLE_ROWS: [(u32, u32); 10] = [
        (5, 0),
        (5, 25),
        (20, 0),
        (20, 25),
        (35, 0),
        (35, 25),
        (50, 0),
        (50, 25),
        (70, 0),
        (70, 25),
    ];

    pub fn new(frame_length_ms: u32, overlap_pct: u32) -> Self {
        Self {
            n_mfcc: 40,
            n_mel_filters: 40,
            frame_length_ms,
            overlap_pct,
            fmin_hz: 0.0,
            fmax_hz: f64::from(SAMPLE_RATE_HZ) / 2.0,
        }
    }

    pub fn table_rows() -> impl Iterator<Item = MfccConfig> {
        Self::TABLE_ROWS.iter().map(|&(f, o)| Self::new(f, o))
    }

    pub fn validate(&self) -> Result<(), MfccError> {
        let bad = |m: String| Err(MfccError::InvalidConfig(m));
        if self.frame_length_ms == 0 || self.frame_length_ms > 1000 {
            return bad(format!("frame length {} ms outside 1..=1000", self.frame_length_ms));
        }
        if self.overlap_pct >= 100 {
            return bad(format!("overlap {}% must be below 100", self.overlap_pct));
        }
        if !(self.frame_samples() * (100 - self.overlap_pct as usize)).is_multiple_of(100) {
            return bad(format!(
                "{} ms with {}% overlap does not give a whole-sample hop",
                self.frame_length_ms, self.overlap_pct
            ));
        }
        if self.n_mfcc == 0 || self.n_mfcc > self.n_mel_filters {
            return bad(format!(
                "n_mfcc {} must be in 1..=n_mel_filters ({})",
                self.n_mfcc, self.n_mel_filters
            ));
        }
        let nyquist = f64::from(SAMPLE_RATE_HZ) / 2.0;
        if !(self.fmin_hz >= 0.0 && self.fmin_hz < self.fmax_hz && self.fmax_hz <= nyquist) {
            return bad(format!(
                "need 0 <= fmin ({}) < fmax ({}) <= {nyquist}",
                self.fmin_hz, self.fmax_hz
            ));
        }
        Ok(())
    }

    pub fn frame_samples(&self) -> usize {
        (self.frame_length_ms * SAMPLES_PER_MS) as usize
    }

    pub fn hop_samples(&self) -> usize {
        self.frame_samples() * (100 - self.overlap_pct as usize) / 100
    }

    pub fn hop_ms(&self) -> f64 {
        f64::from(self.frame_length_ms) * f64::from(100 - self.overlap_pct) / 100.0
    }

    /// `ceil(1000 / hop_ms)`, evaluated in whole samples.
    pub fn n_frames(&self) -> usize {
        SEGMENT_LEN.div_ceil(self.hop_samples())
    }

    pub fn fft_size(&self) -> usize {
        self.frame_samples().next_power_of_two()
    }

    pub fn fft_bins(&self) -> usize {
        self.fft_size() / 2 + 1
    }
}

/// Row-major (`n_mfcc` x `n_frames`) feature image; column `t` is frame `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct MfccMatrix {
    pub n_mfcc: usize,
    pub n_frames: usize,
    pub coefficients: Vec<f32>,
}

impl MfccMatrix {
    pub fn zeros(n_mfcc: usize, n_frames: usize) -> Self {
        Self {
            n_mfcc,
            n_frames,
            coefficients: vec![0.0; n_mfcc * n_frames],
        }
    }

    pub fn get(&self, coeff: usize, frame: usize) -> f32 {
        self.coefficients[coeff * self.n_frames + frame]
    }

    pub fn column(&self, frame: usize) -> Vec<f32> {
        (0..self.n_mfcc).map(|i| self.get(i, frame)).collect()
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.coefficients.chunks(self.n_frames)
    }
}

/// Triangular filterbank, `n_mel_filters` rows by `fft_bins` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    pub n_filters: usize,
    pub n_bins: usize,
    weights: Vec<f64>,
    /// Filter edge/center frequencies in Hz (`n_filters + 2` points).
    pub points_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn row(&self, filter: usize) -> &[f64] {
        &self.weights[filter * self.n_bins..(filter + 1) * self.n_bins]
    }

    pub fn center_hz(&self, filter: usize) -> f64 {
        self.points_hz[filter + 1]
    }

    /// Weighted sums of `power` (length `n_bins`) per filter.
    pub fn apply(&self, power: &[f64], out: &mut [f64]) {
        debug_assert_eq!(power.len(), self.n_bins);
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.row(k).iter().zip(power).map(|(w, p)| w * p).sum();
        }
    }
}

/// Builds triangular filters whose centers are evenly spaced in mel between
/// `fmin_hz` and `fmax_hz`.
///
/// At small FFT sizes the lowest triangles can be narrower than one bin and
/// fall between bin frequencies. Such a filter gets unit weight on the bin
/// nearest its center so that every filter sees some energy.
pub fn build_mel_filterbank(config: &MfccConfig) -> Result<MelFilterbank, MfccError> {
    config.validate()?;
    let n_filters = config.n_mel_filters;
    let fft_size = config.fft_size();
    let n_bins = config.fft_bins();
    if n_bins < n_filters {
        return Err(MfccError::DegenerateFilter { fft_size, bins: n_bins, filters: n_filters });
    }

    let mel_lo = hz_to_mel(config.fmin_hz)?;
    let mel_hi = hz_to_mel(config.fmax_hz)?;
    let step = (mel_hi - mel_lo) / (n_filters + 1) as f64;
    let points_hz = (0..n_filters + 2)
        .map(|i| mel_to_hz(mel_lo + step * i as f64))
        .collect::<Result<Vec<_>, _>>()?;

    let bin_hz = f64::from(SAMPLE_RATE_HZ) / fft_size as f64;
    let mut weights = vec![0.0; n_filters * n_bins];
    for k in 0..n_filters {
        let (lo, center, hi) = (points_hz[k], points_hz[k + 1], points_hz[k + 2]);
        let row = &mut weights[k * n_bins..(k + 1) * n_bins];
        for (b, w) in row.iter_mut().enumerate() {
            let f = b as f64 * bin_hz;
            let rising = (f - lo) / (center - lo);
            let falling = (hi - f) / (hi - center);
            *w = rising.min(falling).max(0.0);
        }
        if row.iter().all(|&w| w == 0.0) {
            let nearest = ((center / bin_hz).round() as usize).min(n_bins - 1);
            row[nearest] = 1.0;
        }
    }
    Ok(MelFilterbank { n_filters, n_bins, weights, points_hz })
}

/// Periodic Hann window of length `n`.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Cuts `n_frames` windowed frames from a full segment. Frames running past
/// the end of the segment are zero-filled.
pub fn frame_signal(segment: &AudioSegment, config: &MfccConfig) -> Vec<Vec<f64>> {
    let window = hann_window(config.frame_samples());
    frames_with(segment.samples(), config, &window).collect()
}

fn frames_with<'a>(
    samples: &'a [f64],
    config: &MfccConfig,
    window: &'a [f64],
) -> impl Iterator<Item = Vec<f64>> + 'a {
    let hop = config.hop_samples();
    let len = config.frame_samples();
    (0..config.n_frames()).map(move |t| {
        let start = t * hop;
        (0..len)
            .map(|i| samples.get(start + i).copied().unwrap_or(0.0) * window[i])
            .collect()
    })
}

/// Cosine transform of log filterbank energies, coefficients `1..=n_out`.
pub fn cepstral_transform(log_energies: &[f64], table: &[f64], n_out: usize, out: &mut [f64]) {
    let n = log_energies.len();
    let norm = (2.0 / n as f64).sqrt();
    for i in 0..n_out {
        let row = &table[i * n..(i + 1) * n];
        let acc: f64 = row.iter().zip(log_energies).map(|(c, e)| c * e).sum();
        out[i] = norm * acc;
    }
}

/// Coefficients `1..=n_out` of one frame of linear filterbank energies:
/// floor, natural log, cosine transform.
pub fn mfcc_from_energies(energies: &[f64], n_out: usize) -> Vec<f64> {
    let logs: Vec<f64> = energies.iter().map(|&e| e.max(LOG_FLOOR).ln()).collect();
    let mut out = vec![0.0; n_out];
    cepstral_transform(&logs, &cosine_table(energies.len(), n_out), n_out, &mut out);
    out
}

/// `cos(i * pi * (j - 0.5) / n)` for `i = 1..=n_out`, `j = 1..=n`, row-major.
pub fn cosine_table(n: usize, n_out: usize) -> Vec<f64> {
    let mut table = Vec::with_capacity(n * n_out);
    for i in 1..=n_out {
        for j in 1..=n {
            table.push((i as f64 * PI * (j as f64 - 0.5) / n as f64).cos());
        }
    }
    table
}

/// Reusable extractor: the filterbank, window, FFT plan and cosine table are
/// built once and shared read-only across segments.
#[derive(Clone)]
pub struct MfccExtractor {
    config: MfccConfig,
    filterbank: MelFilterbank,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    cosines: Vec<f64>,
}

impl std::fmt::Debug for MfccExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MfccExtractor").field("config", &self.config).finish_non_exhaustive()
    }
}

impl MfccExtractor {
    pub fn new(config: MfccConfig) -> Result<Self, MfccError> {
        let filterbank = build_mel_filterbank(&config)?;
        let fft = FftPlanner::new().plan_fft_forward(config.fft_size());
        Ok(Self {
            window: hann_window(config.frame_samples()),
            cosines: cosine_table(config.n_mel_filters, config.n_mfcc),
            filterbank,
            fft,
            config,
        })
    }

    pub fn config(&self) -> &MfccConfig {
        &self.config
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    /// One-sided power spectrum (`fft_size / 2 + 1` bins) of an already
    /// windowed frame.
    pub fn power_spectrum(&self, frame: &[f64]) -> Vec<f64> {
        let n = self.config.fft_size();
        let mut buf: Vec<Complex<f64>> = frame.iter().map(|&x| Complex::new(x, 0.0)).collect();
        buf.resize(n, Complex::new(0.0, 0.0));
        self.fft.process(&mut buf);
        buf[..self.config.fft_bins()].iter().map(|c| c.norm_sqr()).collect()
    }

    /// Floored natural-log filterbank energies, one vector per frame.
    pub fn log_mel_energies(&self, segment: &AudioSegment) -> Result<Vec<Vec<f64>>, MfccError> {
        self.check_len(segment)?;
        let mut energies = vec![0.0; self.config.n_mel_filters];
        Ok(frames_with(segment.samples(), &self.config, &self.window)
            .map(|frame| {
                let power = self.power_spectrum(&frame);
                self.filterbank.apply(&power, &mut energies);
                energies.iter().map(|&e| e.max(LOG_FLOOR).ln()).collect()
            })
            .collect())
    }

    /// Cepstral coefficients from already-computed log energies.
    pub fn cepstrum(&self, log_energies: &[Vec<f64>]) -> MfccMatrix {
        let n_mfcc = self.config.n_mfcc;
        let n_frames = log_energies.len();
        let mut m = MfccMatrix::zeros(n_mfcc, n_frames);
        let mut col = vec![0.0; n_mfcc];
        for (t, frame) in log_energies.iter().enumerate() {
            cepstral_transform(frame, &self.cosines, n_mfcc, &mut col);
            for (i, &c) in col.iter().enumerate() {
                m.coefficients[i * n_frames + t] = c as f32;
            }
        }
        m
    }

    pub fn mfcc(&self, segment: &AudioSegment) -> Result<MfccMatrix, MfccError> {
        Ok(self.cepstrum(&self.log_mel_energies(segment)?))
    }

    fn check_len(&self, segment: &AudioSegment) -> Result<(), MfccError> {
        let got = segment.samples().len();
        if got != SEGMENT_LEN {
            return Err(MfccError::ConfigMismatch { got, expected: SEGMENT_LEN });
        }
        Ok(())
    }
}

/// One-shot convenience around [`MfccExtractor`].
pub fn mfcc(segment: &AudioSegment, config: &MfccConfig) -> Result<MfccMatrix, MfccError> {
    MfccExtractor::new(config.clone())?.mfcc(segment)
}
