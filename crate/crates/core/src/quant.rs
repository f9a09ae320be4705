//! Uniform 16-bit weight quantization with bit-sharing across {4, 8, 16} bits.
//!
//! Every weight tensor is stored as one 16-bit code per element plus its
//! `(w_min, w_max)` bounds. Lower precisions are top-bit truncations of the
//! same code, so the three candidates share storage. The code splits into the
//! top nibble (bits 15..12), the second nibble (bits 11..8) and the low byte.

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const CODE_MAX: u32 = u16::MAX as u32;

const MASK_14: u16 = 0xF000;
const MASK_58: u16 = 0x0F00;
const MASK_916: u16 = 0x00FF;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum QuantChoice {
    Bits4,
    Bits8,
    Bits16,
}

impl QuantChoice {
    pub const ALL: [QuantChoice; 3] = [QuantChoice::Bits4, QuantChoice::Bits8, QuantChoice::Bits16];

    pub fn bits(self) -> u8 {
        match self {
            QuantChoice::Bits4 => 4,
            QuantChoice::Bits8 => 8,
            QuantChoice::Bits16 => 16,
        }
    }

    pub fn from_bits(bits: u32) -> Result<Self> {
        match bits {
            4 => Ok(QuantChoice::Bits4),
            8 => Ok(QuantChoice::Bits8),
            16 => Ok(QuantChoice::Bits16),
            other => Err(Error::config(format!("quantization width must be 4, 8 or 16 bits, got {other}"))),
        }
    }

    /// Mask that keeps the top `bits()` bits of a 16-bit code.
    pub fn code_mask(self) -> u16 {
        match self {
            QuantChoice::Bits4 => MASK_14,
            QuantChoice::Bits8 => MASK_14 | MASK_58,
            QuantChoice::Bits16 => u16::MAX,
        }
    }
}

/// Learnable thresholds deciding whether bits 5..8 and 9..16 are kept.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantThresholds {
    pub t_q58: f64,
    pub t_q916: f64,
}

/// 16-bit codes of a tensor together with the normalization bounds.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantState {
    pub codes: Vec<u16>,
    pub w_min: f64,
    pub w_max: f64,
    pub shape: Vec<usize>,
}

fn bounds(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// `round(Norm(v) * levels)` with round-half-away-from-zero, clamped to the code range.
fn encode_value(v: f64, w_min: f64, w_max: f64, levels: u32) -> u32 {
    if w_max <= w_min {
        return 0;
    }
    let norm = (v - w_min) / (w_max - w_min);
    (norm * levels as f64).round().clamp(0.0, levels as f64) as u32
}

fn decode_value(code: u32, w_min: f64, w_max: f64, levels: u32) -> f64 {
    if w_max <= w_min {
        return w_min;
    }
    if code >= levels {
        return w_max;
    }
    w_min + code as f64 / levels as f64 * (w_max - w_min)
}

impl QuantState {
    /// 16-bit encoding with bounds taken from the tensor itself.
    pub fn encode(w: &Tensor) -> Self {
        if w.is_empty() {
            return QuantState {
                codes: Vec::new(),
                w_min: 0.0,
                w_max: 0.0,
                shape: w.shape().to_vec(),
            };
        }
        let (lo, hi) = bounds(w.data());
        Self::encode_with_bounds(w, lo, hi)
    }

    /// 16-bit encoding against externally fixed bounds (values outside are clamped).
    pub fn encode_with_bounds(w: &Tensor, w_min: f64, w_max: f64) -> Self {
        let codes = w
            .data()
            .iter()
            .map(|&v| encode_value(v, w_min, w_max, CODE_MAX) as u16)
            .collect();
        QuantState {
            codes,
            w_min,
            w_max,
            shape: w.shape().to_vec(),
        }
    }

    pub fn decode_code(&self, code: u16) -> f64 {
        decode_value(code as u32, self.w_min, self.w_max, CODE_MAX)
    }

    pub fn decode(&self) -> Tensor {
        self.decode_masked(u16::MAX)
    }

    /// Decodes every code after `code & mask`.
    pub fn decode_masked(&self, mask: u16) -> Tensor {
        let data = self.codes.iter().map(|&c| self.decode_code(c & mask)).collect();
        Tensor::new(self.shape.clone(), data).expect("codes match shape")
    }

    /// Real-valued contribution of each band; the `w_min` offset belongs to the top band,
    /// so the three parts add up to the decoded tensor.
    pub fn band_values(&self) -> BandValues {
        let range = if self.w_max > self.w_min { self.w_max - self.w_min } else { 0.0 };
        let part = |mask: u16, offset: f64| {
            let data = self
                .codes
                .iter()
                .map(|&c| offset + (c & mask) as f64 / CODE_MAX as f64 * range)
                .collect();
            Tensor::new(self.shape.clone(), data).expect("codes match shape")
        };
        BandValues {
            v14: part(MASK_14, self.w_min),
            v58: part(MASK_58, 0.0),
            v916: part(MASK_916, 0.0),
        }
    }
}

/// Integer bands of a 16-bit code: bits 15..12, 11..8 and 7..0 kept in place.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bands {
    pub c14: Vec<u16>,
    pub c58: Vec<u16>,
    pub c916: Vec<u16>,
}

pub fn band_decompose(q: &QuantState) -> Bands {
    Bands {
        c14: q.codes.iter().map(|c| c & MASK_14).collect(),
        c58: q.codes.iter().map(|c| c & MASK_58).collect(),
        c916: q.codes.iter().map(|c| c & MASK_916).collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BandValues {
    pub v14: Tensor,
    pub v58: Tensor,
    pub v916: Tensor,
}

/// Uniform quantization to an arbitrary width (1..=16). Public callers go through
/// [`quantize`], which restricts the width to the searchable set.
pub(crate) fn quantize_to_width(w: &Tensor, bits: u32) -> Tensor {
    if w.is_empty() {
        return w.clone();
    }
    let levels = (1u32 << bits) - 1;
    let (lo, hi) = bounds(w.data());
    w.map(|v| decode_value(encode_value(v, lo, hi, levels), lo, hi, levels))
}

/// Quantize-dequantize `w` at `bits` in {4, 8, 16}.
pub fn quantize(w: &Tensor, bits: u32) -> Result<Tensor> {
    QuantChoice::from_bits(bits)?;
    Ok(quantize_to_width(w, bits))
}

/// Straight-through quantization node: forward is `quantize(w, bits)`, backward is identity.
pub fn quantize_ste(g: &mut Graph, w: Var, bits: u32) -> Result<Var> {
    let q = quantize(g.value(w), bits)?;
    g.straight_through(w, q)
}

/// Hard quantization used for payloads and finetuning: the 16-bit code truncated
/// to its top `choice.bits()` bits.
pub fn apply_hard_quant(w: &Tensor, choice: QuantChoice) -> Tensor {
    QuantState::encode(w).decode_masked(choice.code_mask())
}

/// Summed squared norms of the 5..8 and 9..16 band contributions over a layer's tensors.
pub fn band_norms(weights: &[&Tensor]) -> (f64, f64) {
    weights.iter().fold((0.0, 0.0), |(n58, n916), w| {
        let b = QuantState::encode(w).band_values();
        (n58 + b.v58.squared_l2(), n916 + b.v916.squared_l2())
    })
}

impl QuantThresholds {
    /// Thresholds equal to the current band norms, so both gates start at 0.5.
    pub fn balanced(weights: &[&Tensor]) -> Self {
        let (t_q58, t_q916) = band_norms(weights);
        QuantThresholds { t_q58, t_q916 }
    }

    pub fn indicators(&self, weights: &[&Tensor]) -> (f64, f64) {
        let (n58, n916) = band_norms(weights);
        (n58 - self.t_q58, n916 - self.t_q916)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Bit-sharing composition of a single tensor evaluated directly:
/// `w_q = v14 + g58 * (v58 + g916 * v916)`.
pub fn compose_bitsharing(w: &Tensor, thresholds: &QuantThresholds) -> (Tensor, (f64, f64)) {
    let (id58, id916) = thresholds.indicators(&[w]);
    let gates = (sigmoid(id58), sigmoid(id916));
    (compose_with_gates(w, gates), gates)
}

/// Bit-sharing composition with explicitly supplied gate values.
pub fn compose_with_gates(w: &Tensor, (g58, g916): (f64, f64)) -> Tensor {
    let b = QuantState::encode(w).band_values();
    let data = b
        .v14
        .data()
        .iter()
        .zip(b.v58.data())
        .zip(b.v916.data())
        .map(|((a, m), l)| a + g58 * (m + g916 * l))
        .collect();
    Tensor::new(w.shape().to_vec(), data).expect("shape preserved")
}

/// Table of indicator signs to bit width; zero counts as positive.
pub fn select_from_indicators(id58: f64, id916: f64) -> QuantChoice {
    match (id58 >= 0.0, id916 >= 0.0) {
        (true, true) => QuantChoice::Bits16,
        (true, false) => QuantChoice::Bits8,
        (false, _) => QuantChoice::Bits4,
    }
}

pub fn select_quant(weights: &[&Tensor], thresholds: &QuantThresholds) -> QuantChoice {
    let (id58, id916) = thresholds.indicators(weights);
    select_from_indicators(id58, id916)
}

/// How the bit-sharing gates are produced inside a graph.
#[derive(Clone, Copy, Debug)]
pub enum QuantGates {
    /// Sigmoid of the indicators, differentiable in the thresholds.
    Learned { t_q58: Var, t_q916: Var, tau: (f64, f64) },
    /// Fixed gate values (tests and reference runs).
    Forced(f64, f64),
}

/// Graph-side result of bit-sharing a layer's weight tensors.
#[derive(Clone, Debug)]
pub struct BitShared {
    pub weights: Vec<Var>,
    pub g58: Var,
    pub g916: Var,
}

/// Builds the bit-sharing quantization of several tensors that share one pair of gates.
///
/// Rounding is straight-through: the forward value of each tensor is its
/// 16-bit decode, the backward pass is the identity onto the raw weights. Band
/// norms feed the gates through straight-through copies of the band values, so
/// the gates reach both the thresholds and the weights.
pub fn bitshare_graph(g: &mut Graph, weights: &[Var], gates: QuantGates) -> Result<BitShared> {
    let mut decoded = Vec::with_capacity(weights.len());
    let mut bands = Vec::with_capacity(weights.len());
    let mut n58 = None;
    let mut n916 = None;
    for &w in weights {
        let q = QuantState::encode(g.value(w));
        let bv = q.band_values();
        decoded.push(g.straight_through(w, q.decode())?);
        if let QuantGates::Learned { .. } = gates {
            let s58 = g.straight_through(w, bv.v58.clone())?;
            let s916 = g.straight_through(w, bv.v916.clone())?;
            let a = g.squared_l2(s58);
            let b = g.squared_l2(s916);
            n58 = Some(match n58 {
                Some(prev) => g.add(prev, a)?,
                None => a,
            });
            n916 = Some(match n916 {
                Some(prev) => g.add(prev, b)?,
                None => b,
            });
        }
        bands.push(bv);
    }
    let (g58, g916) = match gates {
        QuantGates::Learned { t_q58, t_q916, tau } => {
            let zero = g.scalar(0.0);
            let id58 = g.sub(n58.unwrap_or(zero), t_q58)?;
            let id916 = g.sub(n916.unwrap_or(zero), t_q916)?;
            let z58 = g.scalar_mul(id58, 1.0 / tau.0);
            let z916 = g.scalar_mul(id916, 1.0 / tau.1);
            (g.sigmoid(z58), g.sigmoid(z916))
        }
        QuantGates::Forced(a, b) => (g.scalar(a), g.scalar(b)),
    };
    // w_q = w* + (g58 - 1) v58 + (g58 g916 - 1) v916
    let g58_m1 = g.offset(g58, -1.0);
    let both = g.mul(g58, g916)?;
    let both_m1 = g.offset(both, -1.0);
    let mut out = Vec::with_capacity(weights.len());
    for (w_star, bv) in decoded.into_iter().zip(bands) {
        let c58 = g.constant(bv.v58);
        let c916 = g.constant(bv.v916);
        let a = g.mul(g58_m1, c58)?;
        let b = g.mul(both_m1, c916)?;
        let s = g.add(w_star, a)?;
        out.push(g.add(s, b)?);
    }
    Ok(BitShared { weights: out, g58, g916 })
}

/// Hard quantization restricted to the elements where `mask` is true: the bounds
/// come from the selected elements only and unselected elements pass through.
pub fn apply_hard_quant_masked(w: &Tensor, mask: &[bool], choice: QuantChoice) -> Tensor {
    let selected: Vec<f64> = w.data().iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| v).collect();
    let q = apply_hard_quant(&Tensor::from_vec(selected), choice);
    let mut out = w.clone();
    let mut it = q.data().iter();
    for (o, &m) in out.data_mut().iter_mut().zip(mask) {
        if m {
            *o = *it.next().expect("one value per selected element");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(&[n], |_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn two_bit_hand_example() {
        let w = Tensor::from_vec(vec![-1.0, 0.0, 1.0]);
        let q = quantize_to_width(&w, 2);
        assert_eq!(q.data()[0], -1.0);
        assert!((q.data()[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(q.data()[2], 1.0);
    }

    #[test]
    fn endpoints_are_preserved() {
        let w = Tensor::from_vec(vec![-0.37, 1.91]);
        for bits in [4, 8, 16] {
            assert_eq!(quantize(&w, bits).unwrap(), w);
        }
    }

    #[test]
    fn quantize_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = random(50, &mut rng);
        let once = quantize(&w, 8).unwrap();
        let twice = quantize(&once, 8).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_width_is_config_error() {
        let w = Tensor::from_vec(vec![0.0, 1.0]);
        assert!(matches!(quantize(&w, 2), Err(Error::Config(_))));
        assert!(matches!(quantize(&w, 32), Err(Error::Config(_))));
    }

    #[test]
    fn constant_tensor_quantizes_to_itself() {
        let w = Tensor::full(&[4], 0.75);
        let q = QuantState::encode(&w);
        assert!(q.codes.iter().all(|&c| c == 0));
        assert_eq!(quantize(&w, 4).unwrap(), w);
    }

    #[test]
    fn band_masks() {
        let q = QuantState {
            codes: vec![0xA5C3, 0x0000, 0xFFFF],
            w_min: 0.0,
            w_max: 1.0,
            shape: vec![3],
        };
        let b = band_decompose(&q);
        assert_eq!(b.c14, vec![0xA000, 0, 0xF000]);
        assert_eq!(b.c58, vec![0x0500, 0, 0x0F00]);
        assert_eq!(b.c916, vec![0x00C3, 0, 0x00FF]);
        for i in 0..3 {
            assert_eq!(b.c14[i] + b.c58[i] + b.c916[i], q.codes[i]);
        }
    }

    #[test]
    fn forced_gates_reconstruct_or_truncate() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let w = random(40, &mut rng);
        let full = compose_with_gates(&w, (1.0, 1.0));
        let q16 = quantize(&w, 16).unwrap();
        for (a, b) in full.data().iter().zip(q16.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let top = compose_with_gates(&w, (0.0, 0.7));
        let v14 = QuantState::encode(&w).band_values().v14;
        assert_eq!(top, v14);
        assert_eq!(top, apply_hard_quant(&w, QuantChoice::Bits4));
    }

    #[test]
    fn balanced_thresholds_give_half_gates() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let w = random(30, &mut rng);
        let t = QuantThresholds::balanced(&[&w]);
        let (wq, (g58, g916)) = compose_bitsharing(&w, &t);
        assert_eq!((g58, g916), (0.5, 0.5));
        let b = QuantState::encode(&w).band_values();
        for i in 0..30 {
            let direct = b.v14.data()[i] + 0.5 * b.v58.data()[i] + 0.25 * b.v916.data()[i];
            assert!((wq.data()[i] - direct).abs() < 1e-15);
        }
    }

    #[test]
    fn graph_route_matches_direct_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let w = random(25, &mut rng);
        let t = QuantThresholds {
            t_q58: QuantThresholds::balanced(&[&w]).t_q58 * 0.9,
            t_q916: QuantThresholds::balanced(&[&w]).t_q916 * 1.2,
        };
        let (direct, gates) = compose_bitsharing(&w, &t);
        let mut g = Graph::new();
        let wv = g.param(w.clone());
        let t58 = g.param(Tensor::scalar(t.t_q58));
        let t916 = g.param(Tensor::scalar(t.t_q916));
        let out = bitshare_graph(&mut g, &[wv], QuantGates::Learned { t_q58: t58, t_q916: t916, tau: (1.0, 1.0) }).unwrap();
        assert!((g.value(out.g58).item() - gates.0).abs() < 1e-15);
        assert!((g.value(out.g916).item() - gates.1).abs() < 1e-15);
        for (a, b) in g.value(out.weights[0]).data().iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn selection_table() {
        assert_eq!(select_from_indicators(1.0, 1.0), QuantChoice::Bits16);
        assert_eq!(select_from_indicators(1.0, -1.0), QuantChoice::Bits8);
        assert_eq!(select_from_indicators(-1.0, 1.0), QuantChoice::Bits4);
        assert_eq!(select_from_indicators(-1.0, -1.0), QuantChoice::Bits4);
        assert_eq!(select_from_indicators(0.0, 0.0), QuantChoice::Bits16);
    }

    #[test]
    fn hard_quant_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let w = random(20, &mut rng);
        assert_eq!(apply_hard_quant(&w, QuantChoice::Bits16), quantize(&w, 16).unwrap());
        // codes that are multiples of 0x1000 survive 4-bit truncation
        let grid = Tensor::from_fn(&[16], |i| (i as f64 * 4096.0) / 65535.0);
        let grid = Tensor::new(vec![17], [grid.data(), &[1.0]].concat()).unwrap();
        let q4 = apply_hard_quant(&grid, QuantChoice::Bits4);
        for (a, b) in q4.data()[..16].iter().zip(grid.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_hard_quant_leaves_unselected() {
        let w = Tensor::from_vec(vec![0.1, 5.0, -0.3, 0.2]);
        let mask = [true, false, true, true];
        let q = apply_hard_quant_masked(&w, &mask, QuantChoice::Bits16);
        assert_eq!(q.data()[1], 5.0);
        assert_eq!(q.data()[2], -0.3);
        assert!((q.data()[0] - 0.1).abs() < 1e-5);
    }
}
