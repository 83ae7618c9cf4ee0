//! Deterministic test signals at 16 kHz.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::SAMPLE_RATE_HZ;

fn n_samples(seconds: f64) -> usize {
    (seconds * f64::from(SAMPLE_RATE_HZ)).round() as usize
}

pub fn silence(seconds: f64) -> Vec<f64> {
    vec![0.0; n_samples(seconds)]
}

pub fn tone(seconds: f64, freq_hz: f64, amplitude: f64) -> Vec<f64> {
    let sr = f64::from(SAMPLE_RATE_HZ);
    (0..n_samples(seconds))
        .map(|i| amplitude * (2.0 * PI * freq_hz * i as f64 / sr).sin())
        .collect()
}

/// Silence with one exponentially decaying white-noise burst starting at
/// `start_s` and lasting `length_s`, a rough stand-in for a cough.
pub fn burst_clip(seconds: f64, start_s: f64, length_s: f64, seed: u64) -> Vec<f64> {
    let mut out = silence(seconds);
    add_burst(&mut out, start_s, length_s, seed);
    out
}

/// Adds a decaying noise burst in place.
pub fn add_burst(samples: &mut [f64], start_s: f64, length_s: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = n_samples(start_s);
    let len = n_samples(length_s);
    let tau = len as f64 / 4.0;
    for (k, s) in samples.iter_mut().skip(start).take(len).enumerate() {
        *s += 0.6 * (-(k as f64) / tau).exp() * rng.gen_range(-1.0..1.0);
    }
}
