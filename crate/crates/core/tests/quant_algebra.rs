use faqs::checks;
use faqs::quant::{self, QuantChoice, QuantState};
use faqs::autodiff::Tensor;

#[test]
fn band_completeness() {
    let r = checks::quant_band_completeness(100, 21);
    assert!(r.passed(), "{}", r.summary());
}

#[test]
fn error_shrinks_with_width() {
    let r = checks::quant_monotonicity(100, 22);
    assert!(r.passed(), "{}", r.summary());
}

#[test]
fn quantize_is_idempotent() {
    let r = checks::quant_idempotence(100, 23);
    assert!(r.passed(), "{}", r.summary());
}

#[test]
fn saturated_bitsharing_is_hard_truncation() {
    let r = checks::quant_hard_soft(100, 24);
    assert!(r.passed(), "{}", r.summary());
}

#[test]
fn truncated_codes_are_prefixes() {
    let w = Tensor::from_fn(&[64], |i| ((i * 37) % 64) as f64 / 7.0 - 3.0);
    let q = QuantState::encode(&w);
    let four = quant::apply_hard_quant(&w, QuantChoice::Bits4);
    let eight = quant::apply_hard_quant(&w, QuantChoice::Bits8);
    let full = q.decode();
    for i in 0..w.len() {
        assert!(four.data()[i] <= eight.data()[i] + 1e-12);
        assert!(eight.data()[i] <= full.data()[i] + 1e-12);
    }
}

#[test]
fn constant_tensor_survives_quantization() {
    let w = Tensor::full(&[5], 0.25);
    for b in [4, 8, 16] {
        let q = quant::quantize(&w, b).unwrap();
        assert!(q.data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }
}
