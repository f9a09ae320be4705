use faqs::checks;
use faqs::quant::{select_from_indicators, QuantChoice};
use faqs::superkernel::BlockChoice;

#[test]
fn every_sign_pattern_maps_as_tabulated() {
    for r in checks::decision_tables(31) {
        assert!(r.passed(), "{}", r.summary());
    }
}

#[test]
fn tables_are_sign_invariant() {
    for &(a, b, c) in &[(1e-9, 1e-9, 1e-9), (1e9, 3.0, 0.5), (7.0, -1e-12, 2.0)] {
        assert_eq!(BlockChoice::from_indicators(a, b, c), BlockChoice::from_indicators(a * 3.0, b * 2.0, c * 5.0));
    }
    assert_eq!(BlockChoice::from_indicators(-1e-300, 1.0, 1.0), BlockChoice::Skip);
    assert_eq!(select_from_indicators(-0.5, 100.0), QuantChoice::Bits4);
    assert_eq!(select_from_indicators(0.0, -0.0), QuantChoice::Bits16);
}
