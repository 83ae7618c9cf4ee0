use coughwatch_core::cnn::forward;
use coughwatch_core::mfcc::MfccMatrix;
use coughwatch_core::quantize::{forward_quantized, quantize_model};
use coughwatch_core::weights::{Kernel, ModelWeights, DEFAULT_INPUT};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Feature image with MFCC-like dynamics: a large, mostly negative first
/// coefficient and decaying higher ones.
fn random_features(rng: &mut ChaCha8Rng) -> MfccMatrix {
    let (h, w) = DEFAULT_INPUT;
    let mut m = MfccMatrix::zeros(h, w);
    for i in 0..h {
        let spread = 20.0 / (1.0 + i as f32);
        for t in 0..w {
            m.coefficients[i * w + t] = rng.gen_range(-spread..spread) - if i == 0 { 30.0 } else { 0.0 };
        }
    }
    m
}

#[test]
fn every_tensor_round_trips_within_half_step() {
    let w = ModelWeights::seeded(21, DEFAULT_INPUT);
    let q = quantize_model(&w);
    let pairs = w.conv.iter().zip(&q.conv).map(|(a, b)| (&a.kernel, &b.kernel)).chain([(&w.dense.kernel, &q.dense.kernel)]);
    for (orig, quant) in pairs {
        let Kernel::I8(t) = quant else { panic!("not quantized") };
        let s = f64::from(t.scale);
        for (d, o) in t.dequantize_f64().iter().zip(orig.to_f32()) {
            assert!((d - f64::from(o)).abs() <= s / 2.0 * (1.0 + 1e-9));
        }
    }
    assert_eq!(q.conv[0].bias, w.conv[0].bias);
    assert_eq!(q.bn, w.bn);
}

#[test]
fn payload_sizes() {
    let w = ModelWeights::seeded(21, DEFAULT_INPUT);
    let float_kb = w.payload_bytes() as f64 / 1024.0;
    let int8_kb = quantize_model(&w).payload_bytes() as f64 / 1024.0;
    assert!((64.0..=66.0).contains(&float_kb), "{float_kb}");
    assert!(int8_kb <= 17.0, "{int8_kb}");
}

/// Seeded weights with the dense bias set so that half of a calibration
/// set (drawn separately from the evaluation features) scores positive.
fn balanced_weights() -> ModelWeights {
    let mut w = ModelWeights::seeded(21, DEFAULT_INPUT);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut logits: Vec<f32> = (0..101).map(|_| forward(&random_features(&mut rng), &w).unwrap().logit).collect();
    logits.sort_by(f32::total_cmp);
    w.dense.bias -= logits[50];
    w
}

struct Agreement {
    agree: usize,
    positive: usize,
    max_prob_diff: f32,
}

fn compare(w: &ModelWeights, n: usize, seed: u64) -> Agreement {
    let q = quantize_model(w);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Agreement { agree: 0, positive: 0, max_prob_diff: 0.0 };
    for _ in 0..n {
        let x = random_features(&mut rng);
        let a = forward(&x, w).unwrap();
        let b = forward_quantized(&x, &q).unwrap();
        out.agree += usize::from(a.is_cough(0.5) == b.is_cough(0.5));
        out.positive += usize::from(a.is_cough(0.5));
        out.max_prob_diff = out.max_prob_diff.max((a.probability - b.probability).abs());
    }
    out
}

#[test]
fn int8_agrees_with_float() {
    let n = 500;
    let r = compare(&ModelWeights::seeded(21, DEFAULT_INPUT), n, 99);
    println!("agreement {}/{n}, float positives {}", r.agree, r.positive);
    // both labels must occur, otherwise agreement says nothing
    assert!(r.positive > 0 && r.positive < n);
    assert!(r.agree * 100 >= 98 * n);
    assert!(r.max_prob_diff <= 0.05);
}

#[test]
fn int8_probabilities_stay_close_at_a_balanced_boundary() {
    // agreement here sits near 97%: the untrained model's logits are packed
    // within a few tenths of the boundary, where activation rounding decides
    let r = compare(&balanced_weights(), 500, 99);
    println!("balanced agreement {}/500, float positives {}", r.agree, r.positive);
    assert!((200..300).contains(&r.positive));
    assert!(r.max_prob_diff <= 0.05);
}

