//! Gain control, band-pass filtering and onset detection.
//!
//! The band-pass is a Butterworth design realized as cascaded biquads. The
//! analog low-pass prototype of order `filter_order` is mapped to a band-pass
//! (doubling the pole count) and then to the z-plane with the bilinear
//! transform, with both band edges pre-warped. Coefficients are computed once
//! when a [`Preprocessor`] is built.
//!
//! Onset strength is the superflux detection function over the same
//! log-mel frames the MFCC stage uses: the positive part of the frame-to-frame
//! increase, measured against a 3-band maximum-filtered copy of the previous
//! frame, summed across bands.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{AudioSegment, SAMPLE_RATE_HZ};
use crate::mfcc::{MfccExtractor, LOG_FLOOR};

/// Maximum-filter width across mel bands for the superflux reference frame.
pub const SUPERFLUX_MAX_FILTER_BANDS: usize = 3;
/// Frame lag between the current and the reference frame.
pub const SUPERFLUX_LAG: usize = 1;

#[derive(Debug, Error, PartialEq)]
pub enum PreprocessError {
    #[error("invalid band {low} Hz .. {high} Hz (need 0 < low < high < {nyquist} Hz)")]
    InvalidBand { low: f64, high: f64, nyquist: f64 },
    #[error("invalid preprocessing parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub band_low_hz: f64,
    pub band_high_hz: f64,
    pub agc_target_rms: f64,
    pub onset_threshold: f64,
    /// Order of the analog low-pass prototype; the band-pass has twice as
    /// many poles, realized as `filter_order` biquads.
    pub filter_order: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            band_low_hz: 150.0,
            band_high_hz: 2000.0,
            agc_target_rms: 0.1,
            onset_threshold: 0.5,
            filter_order: 4,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<(), PreprocessError> {
        let nyquist = f64::from(SAMPLE_RATE_HZ) / 2.0;
        if !(self.band_low_hz > 0.0 && self.band_low_hz < self.band_high_hz && self.band_high_hz < nyquist) {
            return Err(PreprocessError::InvalidBand {
                low: self.band_low_hz,
                high: self.band_high_hz,
                nyquist,
            });
        }
        if !(self.onset_threshold > 0.0 && self.onset_threshold.is_finite()) {
            return Err(PreprocessError::InvalidParameter(format!(
                "onset_threshold must be positive, got {}",
                self.onset_threshold
            )));
        }
        if !(self.agc_target_rms > 0.0 && self.agc_target_rms <= 1.0) {
            return Err(PreprocessError::InvalidParameter(format!(
                "agc_target_rms must be in (0, 1], got {}",
                self.agc_target_rms
            )));
        }
        if !(1..=8).contains(&self.filter_order) {
            return Err(PreprocessError::InvalidParameter(format!(
                "filter_order must be in 1..=8, got {}",
                self.filter_order
            )));
        }
        Ok(())
    }
}

/// Scales the segment by one gain so the RMS of its real (non-padded)
/// samples equals `agc_target_rms`. The gain is reduced if it would push any
/// sample past full scale. Silence is returned unchanged.
pub fn agc(segment: &AudioSegment, config: &PreprocessConfig) -> AudioSegment {
    let real = segment.real_samples();
    if real.is_empty() {
        return segment.clone();
    }
    let rms = (real.iter().map(|x| x * x).sum::<f64>() / real.len() as f64).sqrt();
    if rms == 0.0 {
        return segment.clone();
    }
    let peak = real.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let gain = (config.agc_target_rms / rms).min(1.0 / peak);
    segment.with_samples(segment.samples().iter().map(|x| (x * gain).clamp(-1.0, 1.0)).collect())
}

/// One second-order section, `a0` normalized to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    fn response(&self, z_inv: Complex64) -> Complex64 {
        let z2 = z_inv * z_inv;
        (self.b[0] + z_inv * self.b[1] + z2 * self.b[2]) / (self.a[0] + z_inv * self.a[1] + z2 * self.a[2])
    }
}

/// Cascaded-biquad Butterworth band-pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BandPass {
    pub sections: Vec<Biquad>,
}

impl BandPass {
    pub fn design(config: &PreprocessConfig) -> Result<Self, PreprocessError> {
        config.validate()?;
        let fs = f64::from(SAMPLE_RATE_HZ);
        let order = config.filter_order;
        let warp = |f: f64| 2.0 * fs * (PI * f / fs).tan();
        let (lo, hi) = (warp(config.band_low_hz), warp(config.band_high_hz));
        let bw = hi - lo;
        let w0 = (lo * hi).sqrt();

        let mut poles = Vec::with_capacity(2 * order);
        for k in 0..order {
            let theta = PI * (2 * k + order + 1) as f64 / (2 * order) as f64;
            let proto = Complex64::from_polar(1.0, theta);
            let half = proto * (bw / 2.0);
            let disc = (half * half - w0 * w0).sqrt();
            for s in [half + disc, half - disc] {
                poles.push((2.0 * fs + s) / (2.0 * fs - s));
            }
        }

        let mut sections = pair_poles(poles)
            .into_iter()
            .map(|a| Biquad { b: [1.0, 0.0, -1.0], a })
            .collect::<Vec<_>>();

        // unit gain at the (pre-warped) geometric band center
        let center = 2.0 * (w0 / (2.0 * fs)).atan();
        let z_inv = Complex64::from_polar(1.0, -center);
        let gain: f64 = sections.iter().map(|s| s.response(z_inv).norm()).product();
        let per_section = gain.powf(-1.0 / sections.len() as f64);
        for s in &mut sections {
            for b in &mut s.b {
                *b *= per_section;
            }
        }
        Ok(Self { sections })
    }

    /// Magnitude response at `freq_hz`.
    pub fn magnitude(&self, freq_hz: f64) -> f64 {
        let w = 2.0 * PI * freq_hz / f64::from(SAMPLE_RATE_HZ);
        let z_inv = Complex64::from_polar(1.0, -w);
        self.sections.iter().map(|s| s.response(z_inv)).product::<Complex64>().norm()
    }

    /// Runs the cascade over `input` from a zero initial state.
    pub fn filter(&self, input: &[f64]) -> Vec<f64> {
        let mut out = input.to_vec();
        for s in &self.sections {
            let (mut z1, mut z2) = (0.0, 0.0);
            for x in &mut out {
                let y = s.b[0] * *x + z1;
                z1 = s.b[1] * *x - s.a[1] * y + z2;
                z2 = s.b[2] * *x - s.a[2] * y;
                *x = y;
            }
        }
        out
    }
}

/// Groups z-plane poles into second-order denominators: conjugate pairs
/// first, then leftover real poles two at a time.
fn pair_poles(poles: Vec<Complex64>) -> Vec<[f64; 3]> {
    const IMAG_EPS: f64 = 1e-12;
    let mut out = Vec::new();
    let mut reals = Vec::new();
    for p in &poles {
        if p.im > IMAG_EPS {
            out.push([1.0, -2.0 * p.re, p.norm_sqr()]);
        } else if p.im.abs() <= IMAG_EPS {
            reals.push(p.re);
        }
    }
    reals.sort_by(f64::total_cmp);
    for pair in reals.chunks(2) {
        match *pair {
            [r1, r2] => out.push([1.0, -(r1 + r2), r1 * r2]),
            [r] => out.push([1.0, -r, 0.0]),
            _ => unreachable!(),
        }
    }
    out
}

/// Designs the filter from `config` and applies it to one segment.
pub fn band_pass(segment: &AudioSegment, config: &PreprocessConfig) -> Result<AudioSegment, PreprocessError> {
    let filter = BandPass::design(config)?;
    Ok(segment.with_samples(filter.filter(segment.samples())))
}

/// Onset-detection value for one analysis frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OnsetStrength {
    pub time_s: f64,
    pub strength: f64,
}

/// A picked onset. `time_s` is relative to the segment start.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OnsetPeak {
    pub time_s: f64,
    pub strength: f64,
}

fn max_filter(bands: &[f64], width: usize) -> Vec<f64> {
    let half = width / 2;
    (0..bands.len())
        .map(|b| {
            let lo = b.saturating_sub(half);
            let hi = (b + half).min(bands.len() - 1);
            bands[lo..=hi].iter().copied().fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

/// Superflux over precomputed log-mel frames. Frames before the first are
/// treated as silence (every band at the log floor).
pub fn superflux(log_mel: &[Vec<f64>], hop_s: f64) -> Vec<OnsetStrength> {
    let Some(first) = log_mel.first() else {
        return Vec::new();
    };
    let silence = vec![LOG_FLOOR.ln(); first.len()];
    log_mel
        .iter()
        .enumerate()
        .map(|(t, frame)| {
            let prev = if t >= SUPERFLUX_LAG { &log_mel[t - SUPERFLUX_LAG] } else { &silence };
            let reference = max_filter(prev, SUPERFLUX_MAX_FILTER_BANDS);
            let strength = frame.iter().zip(&reference).map(|(x, r)| (x - r).max(0.0)).sum();
            OnsetStrength { time_s: t as f64 * hop_s, strength }
        })
        .collect()
}

/// Onset strength of a segment on the extractor's frame grid; times are
/// frame start offsets.
pub fn onset_strength(segment: &AudioSegment, extractor: &MfccExtractor) -> Vec<OnsetStrength> {
    let hop_s = extractor.config().hop_samples() as f64 / f64::from(SAMPLE_RATE_HZ);
    // segments are always full length, so the extractor cannot reject them
    let log_mel = extractor.log_mel_energies(segment).expect("segment length");
    superflux(&log_mel, hop_s)
}

/// Local maxima strictly above `threshold`. A maximum must be strictly
/// greater than both neighbours; an endpoint only compares with the one
/// neighbour it has. A flat top reports its earliest frame.
pub fn pick_peaks(strengths: &[OnsetStrength], threshold: f64) -> Vec<OnsetPeak> {
    let n = strengths.len();
    let mut peaks = Vec::new();
    let mut i = 0;
    while i < n {
        let v = strengths[i].strength;
        let mut j = i;
        while j + 1 < n && strengths[j + 1].strength == v {
            j += 1;
        }
        let rises = i == 0 || strengths[i - 1].strength < v;
        let falls = j == n - 1 || strengths[j + 1].strength < v;
        if rises && falls && v > threshold {
            peaks.push(OnsetPeak { time_s: strengths[i].time_s, strength: v });
        }
        i = j + 1;
    }
    peaks
}

/// Scales strengths by their maximum (when positive) so `threshold` is
/// relative to the strongest frame in the segment.
pub fn normalize_strengths(strengths: &[OnsetStrength]) -> Vec<OnsetStrength> {
    let max = strengths.iter().map(|s| s.strength).fold(0.0, f64::max);
    if max <= 0.0 {
        return strengths.to_vec();
    }
    strengths
        .iter()
        .map(|s| OnsetStrength { time_s: s.time_s, strength: s.strength / max })
        .collect()
}

/// Band-pass filter designed once, plus the rest of the preprocessing
/// parameters.
#[derive(Debug, Clone)]
pub struct Preprocessor {
    config: PreprocessConfig,
    filter: BandPass,
}

impl Preprocessor {
    pub fn new(config: PreprocessConfig) -> Result<Self, PreprocessError> {
        let filter = BandPass::design(&config)?;
        Ok(Self { config, filter })
    }

    pub fn config(&self) -> &PreprocessConfig {
        &self.config
    }

    pub fn filter(&self) -> &BandPass {
        &self.filter
    }

    /// AGC followed by the band-pass filter.
    pub fn condition(&self, segment: &AudioSegment) -> AudioSegment {
        let leveled = agc(segment, &self.config);
        leveled.with_samples(self.filter.filter(leveled.samples()))
    }

    /// Normalized superflux peaks above the configured threshold.
    pub fn onsets(&self, segment: &AudioSegment, extractor: &MfccExtractor) -> Vec<OnsetPeak> {
        let strengths = normalize_strengths(&onset_strength(segment, extractor));
        pick_peaks(&strengths, self.config.onset_threshold)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::SEGMENT_LEN;
    use crate::mfcc::MfccConfig;
    use approx::assert_relative_eq;

    fn seg(samples: Vec<f64>) -> AudioSegment {
        AudioSegment::new(0, &samples)
    }

    fn rms(x: &[f64]) -> f64 {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }

    fn sine(freq: f64, amp: f64) -> Vec<f64> {
        (0..SEGMENT_LEN)
            .map(|n| amp * (2.0 * PI * freq * n as f64 / 16_000.0).sin())
            .collect()
    }

    fn strengths(values: &[f64]) -> Vec<OnsetStrength> {
        values
            .iter()
            .enumerate()
            .map(|(i, &s)| OnsetStrength { time_s: i as f64, strength: s })
            .collect()
    }

    #[test]
    fn agc_cases() {
        let cfg = PreprocessConfig::default();
        let silent = seg(vec![]);
        assert_eq!(agc(&silent, &cfg), silent);

        let out = agc(&seg(vec![0.05; SEGMENT_LEN]), &cfg);
        assert!(out.samples().iter().all(|&x| (x - 0.1).abs() < 1e-12));

        let square: Vec<f64> = (0..SEGMENT_LEN).map(|i| if (i / 40) % 2 == 0 { 1.0 } else { -1.0 }).collect();
        assert_relative_eq!(rms(&square), 1.0);
        let out = agc(&seg(square), &cfg);
        assert_relative_eq!(rms(out.samples()), 0.1, max_relative = 1e-6);
    }

    #[test]
    fn agc_ignores_padding_and_caps_gain() {
        let cfg = PreprocessConfig::default();
        let s = AudioSegment::new(0, &[0.02; 8_000]);
        let out = agc(&s, &cfg);
        assert_relative_eq!(rms(out.real_samples()), 0.1, max_relative = 1e-6);
        assert!(out.samples()[8_000..].iter().all(|&x| x == 0.0));

        // one loud click among near-silence: hitting the RMS target would clip
        let mut spiky = vec![1e-4; SEGMENT_LEN];
        spiky[100] = 0.5;
        let out = agc(&seg(spiky), &cfg);
        let peak = out.samples().iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(peak <= 1.0);
        assert_relative_eq!(peak, 1.0, max_relative = 1e-12);
    }

    #[test]
    fn band_validation() {
        let mut cfg = PreprocessConfig::default();
        cfg.band_high_hz = 8000.0;
        assert!(matches!(BandPass::design(&cfg), Err(PreprocessError::InvalidBand { .. })));
        cfg = PreprocessConfig { band_low_hz: 2000.0, band_high_hz: 150.0, ..Default::default() };
        assert!(matches!(band_pass(&seg(vec![]), &cfg), Err(PreprocessError::InvalidBand { .. })));
        cfg = PreprocessConfig { onset_threshold: 0.0, ..Default::default() };
        assert!(matches!(cfg.validate(), Err(PreprocessError::InvalidParameter(_))));
    }

    #[test]
    fn design_response_meets_mask() {
        let f = BandPass::design(&PreprocessConfig::default()).unwrap();
        assert_eq!(f.sections.len(), 4);
        let ref_db = 20.0 * f.magnitude(1000.0).log10();
        assert!(20.0 * f.magnitude(50.0).log10() <= ref_db - 20.0);
        assert!(20.0 * f.magnitude(4000.0).log10() <= ref_db - 20.0);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for hz in (300..=1500).step_by(10) {
            let db = 20.0 * f.magnitude(f64::from(hz)).log10();
            lo = lo.min(db);
            hi = hi.max(db);
        }
        assert!(hi - lo <= 3.0, "ripple {} dB", hi - lo);
        // stable: all poles inside the unit circle
        for s in &f.sections {
            assert!(s.a[2].abs() < 1.0);
        }
    }

    // Steady-state RMS ratio of the filtered tone, skipping the first half
    // second of transient.
    fn steady_gain(freq: f64) -> f64 {
        let x = sine(freq, 0.5);
        let y = band_pass(&seg(x.clone()), &PreprocessConfig::default()).unwrap();
        rms(&y.samples()[8_000..]) / rms(&x[8_000..])
    }

    #[test]
    fn tone_measurements() {
        let g1k = steady_gain(1000.0);
        assert!((20.0 * g1k.log10()).abs() <= 3.0, "1 kHz gain {g1k}");
        assert!(20.0 * steady_gain(50.0).log10() <= -20.0);
        assert!(20.0 * steady_gain(4000.0).log10() <= -20.0);
    }

    #[test]
    fn band_pass_silence_and_linearity() {
        let cfg = PreprocessConfig::default();
        let out = band_pass(&seg(vec![]), &cfg).unwrap();
        assert!(out.samples().iter().all(|&x| x == 0.0));

        let x: Vec<f64> = (0..SEGMENT_LEN).map(|i| ((i * 7919) % 1000) as f64 / 1000.0 - 0.5).collect();
        let a = 0.37;
        let y = band_pass(&seg(x.clone()), &cfg).unwrap();
        let ya = band_pass(&seg(x.iter().map(|v| v * a).collect()), &cfg).unwrap();
        let scale = y.samples().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (p, q) in y.samples().iter().zip(ya.samples()) {
            assert!((p * a - q).abs() <= 1e-9 * scale * a);
        }
    }

    #[test]
    fn peak_picking() {
        let p = pick_peaks(&strengths(&[0.1, 0.9, 0.2]), 0.5);
        assert_eq!(p, vec![OnsetPeak { time_s: 1.0, strength: 0.9 }]);
        assert!(pick_peaks(&strengths(&[0.4; 6]), 0.5).is_empty());
        let p = pick_peaks(&strengths(&[0.0, 0.6, 0.6, 0.0]), 0.5);
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].time_s, 1.0);
        // endpoints compare with their single neighbour
        let p = pick_peaks(&strengths(&[0.9, 0.1, 0.2, 0.8]), 0.5);
        assert_eq!(p.iter().map(|p| p.time_s).collect::<Vec<_>>(), vec![0.0, 3.0]);
        // strict threshold
        assert!(pick_peaks(&strengths(&[0.0, 0.5, 0.0]), 0.5).is_empty());
    }

    #[test]
    fn onset_silence_is_flat() {
        let ex = MfccExtractor::new(MfccConfig::new(20, 0)).unwrap();
        let s = onset_strength(&seg(vec![]), &ex);
        assert_eq!(s.len(), 50);
        assert!(s.iter().all(|o| o.strength == 0.0));
    }

    #[test]
    fn onset_peaks_at_noise_burst() {
        for cfg in [MfccConfig::new(20, 0), MfccConfig::new(5, 25), MfccConfig::new(35, 0)] {
            let ex = MfccExtractor::new(cfg.clone()).unwrap();
            let mut x = vec![0.0; SEGMENT_LEN];
            let mut state = 12345u64;
            for v in &mut x[8_000..] {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                *v = ((state >> 33) as f64 / (1u64 << 31) as f64) - 0.5;
            }
            let s = onset_strength(&seg(x), &ex);
            let best = s.iter().max_by(|a, b| a.strength.total_cmp(&b.strength)).unwrap();
            let hop = cfg.hop_ms() / 1000.0;
            assert!((best.time_s - 0.5).abs() <= hop, "{cfg:?}: argmax at {}", best.time_s);
        }
    }

    #[test]
    fn stationary_tone_onset_at_first_frame() {
        let ex = MfccExtractor::new(MfccConfig::new(20, 0)).unwrap();
        let s = onset_strength(&seg(sine(440.0, 0.3)), &ex);
        assert!(s[1..].iter().all(|o| o.strength < s[0].strength));
    }
}
