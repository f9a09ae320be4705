//! Differentiable latency and model-size proxies and the per-client Pareto loss.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::quant::QuantChoice;
use crate::superkernel::{BlockChoice, LayerConfig, LayerGates};

/// Convex weights on cross-entropy, latency and model size for one client.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParetoCoefficients {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl ParetoCoefficients {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        let c = ParetoCoefficients { alpha, beta, gamma };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let ParetoCoefficients { alpha, beta, gamma } = *self;
        if [alpha, beta, gamma].iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::config(format!(
                "pareto coefficients must be finite and non-negative, got ({alpha}, {beta}, {gamma})"
            )));
        }
        if (alpha + beta + gamma - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "pareto coefficients must sum to 1, got {alpha} + {beta} + {gamma} = {}",
                alpha + beta + gamma
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostEntry {
    pub latency_ms: f64,
    pub param_count: u64,
}

/// Per-layer costs of the four non-skip block types.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct CostTable {
    entries: BTreeMap<(usize, u8, u8), CostEntry>,
}

const LATENCY_PER_MAC_MS: f64 = 1e-4;

/// Weight count of the expand, depthwise and project convolutions of a `(k, e)` block.
pub fn block_param_count(cfg: &LayerConfig, kernel: usize, ratio: usize) -> u64 {
    let hidden = (ratio * cfg.c_in) as u64;
    hidden * cfg.c_in as u64 + hidden * (kernel * kernel) as u64 + hidden * cfg.c_out as u64
}

impl CostTable {
    /// Synthetic table: latency proportional to `k^2 * e * H_out * W_out`, parameter
    /// counts exact from the layer widths.
    pub fn synthetic(layers: &[LayerConfig], input_hw: (usize, usize)) -> Self {
        let mut entries = BTreeMap::new();
        let (mut h, mut w) = input_hw;
        for cfg in layers {
            h = h.div_ceil(cfg.stride);
            w = w.div_ceil(cfg.stride);
            for kernel in [3u8, 5] {
                for ratio in [3u8, 6] {
                    let k = kernel as f64;
                    entries.insert(
                        (cfg.index, kernel, ratio),
                        CostEntry {
                            latency_ms: LATENCY_PER_MAC_MS * k * k * ratio as f64 * (h * w) as f64,
                            param_count: block_param_count(cfg, kernel as usize, ratio as usize),
                        },
                    );
                }
            }
        }
        CostTable { entries }
    }

    pub fn insert(&mut self, layer: usize, kernel: u8, ratio: u8, entry: CostEntry) {
        self.entries.insert((layer, kernel, ratio), entry);
    }

    pub fn get(&self, layer: usize, kernel: u8, ratio: u8) -> Result<CostEntry> {
        self.entries.get(&(layer, kernel, ratio)).copied().ok_or_else(|| {
            Error::config(format!("cost table has no entry for layer {layer}, kernel {kernel}, ratio {ratio}"))
        })
    }

    pub fn latency(&self, layer: usize, block: BlockChoice) -> Result<f64> {
        match block {
            BlockChoice::Skip => Ok(0.0),
            BlockChoice::Block { kernel, ratio } => Ok(self.get(layer, kernel, ratio)?.latency_ms),
        }
    }

    pub fn param_count(&self, layer: usize, block: BlockChoice) -> Result<u64> {
        match block {
            BlockChoice::Skip => Ok(0),
            BlockChoice::Block { kernel, ratio } => Ok(self.get(layer, kernel, ratio)?.param_count),
        }
    }

    /// Checks coverage of `layers`, positivity and the (3,3) <= (5,6) ordering.
    pub fn validate(&self, layers: &[LayerConfig]) -> Result<()> {
        for cfg in layers {
            for kernel in [3u8, 5] {
                for ratio in [3u8, 6] {
                    let e = self.get(cfg.index, kernel, ratio)?;
                    if !(e.latency_ms.is_finite() && e.latency_ms > 0.0) || e.param_count == 0 {
                        return Err(Error::config(format!(
                            "cost table entry for layer {}, ({kernel},{ratio}) must be positive",
                            cfg.index
                        )));
                    }
                }
            }
            let small = self.get(cfg.index, 3, 3)?;
            let large = self.get(cfg.index, 5, 6)?;
            if large.latency_ms < small.latency_ms || large.param_count < small.param_count {
                return Err(Error::config(format!(
                    "cost table layer {}: (5,6) must cost at least as much as (3,3)",
                    cfg.index
                )));
            }
        }
        Ok(())
    }

    /// Text form: one `layer kernel ratio latency_ms param_count` row per line.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# layer kernel ratio latency_ms param_count\n");
        for ((layer, k, e), c) in &self.entries {
            let _ = writeln!(s, "{layer} {k} {e} {} {}", c.latency_ms, c.param_count);
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(|c: char| c.is_whitespace() || c == ',').filter(|s| !s.is_empty()).collect();
            let bad = |what: &str| Error::config(format!("cost table line {}: {what}", lineno + 1));
            if fields.len() != 5 {
                return Err(bad("expected 5 fields"));
            }
            let layer: usize = fields[0].parse().map_err(|_| bad("bad layer index"))?;
            let kernel: u8 = fields[1].parse().map_err(|_| bad("bad kernel"))?;
            let ratio: u8 = fields[2].parse().map_err(|_| bad("bad ratio"))?;
            let latency_ms: f64 = fields[3].parse().map_err(|_| bad("bad latency"))?;
            let param_count: u64 = fields[4].parse().map_err(|_| bad("bad parameter count"))?;
            if !matches!(kernel, 3 | 5) || !matches!(ratio, 3 | 6) {
                return Err(bad("kernel must be 3 or 5 and ratio 3 or 6"));
            }
            entries.insert((layer, kernel, ratio), CostEntry { latency_ms, param_count });
        }
        Ok(CostTable { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text)
    }

    /// Latency and byte size of the full (5,6), 16-bit architecture.
    pub fn normalizers(&self, layers: &[LayerConfig]) -> Result<(f64, f64)> {
        let mut lat = 0.0;
        let mut ms = 0.0;
        for cfg in layers {
            let e = self.get(cfg.index, 5, 6)?;
            lat += e.latency_ms;
            ms += e.param_count as f64 * 16.0 / 8.0;
        }
        Ok((lat, ms))
    }

    pub fn architecture_latency(&self, arch: &[(usize, BlockChoice)]) -> Result<f64> {
        arch.iter().map(|&(layer, b)| self.latency(layer, b)).sum()
    }

    /// Bytes of the searchable weights under a discrete architecture and bit widths.
    pub fn architecture_size(&self, arch: &[(usize, BlockChoice, QuantChoice)]) -> Result<f64> {
        arch.iter()
            .map(|&(layer, b, q)| Ok(self.param_count(layer, b)? as f64 * q.bits() as f64 / 8.0))
            .sum()
    }
}

/// `g_e3 * sum_{k,e} p(k) p(e) cost(k, e)` as a graph node.
fn expected_block_cost(g: &mut Graph, gates: &LayerGates, c: impl Fn(u8, u8) -> f64) -> Result<Var> {
    let (c33, c36, c53, c56) = (c(3, 3), c(3, 6), c(5, 3), c(5, 6));
    let small_k = g.scalar_mul(gates.g_e6, c36 - c33);
    let small_k = g.offset(small_k, c33);
    let large_k = g.scalar_mul(gates.g_e6, c56 - c53);
    let large_k = g.offset(large_k, c53);
    let diff = g.sub(large_k, small_k)?;
    let mix = g.mul(gates.g_k5, diff)?;
    let inner = g.add(small_k, mix)?;
    g.mul(gates.g_e3, inner)
}

fn sum_nodes(g: &mut Graph, nodes: Vec<Var>) -> Result<Var> {
    let mut it = nodes.into_iter();
    let Some(first) = it.next() else { return Ok(g.scalar(0.0)) };
    it.try_fold(first, |acc, v| g.add(acc, v))
}

/// Expected latency over layers given as `(layer_index, gates)`.
pub fn expected_latency(g: &mut Graph, layers: &[(usize, LayerGates)], table: &CostTable) -> Result<Var> {
    let mut parts = Vec::with_capacity(layers.len());
    for (layer, gates) in layers {
        let lookup = |k, e| table.get(*layer, k, e).map(|c| c.latency_ms);
        for (k, e) in [(3, 3), (3, 6), (5, 3), (5, 6)] {
            lookup(k, e)?;
        }
        parts.push(expected_block_cost(g, gates, |k, e| lookup(k, e).expect("checked"))?);
    }
    sum_nodes(g, parts)
}

/// Expected bits of a layer from the bit-sharing gates: `4 + 4 g58 + 8 g58 g916`.
pub fn expected_bits(g: &mut Graph, gates: &LayerGates) -> Result<Var> {
    let both = g.mul(gates.g58, gates.g916)?;
    let both = g.scalar_mul(both, 8.0);
    let mid = g.scalar_mul(gates.g58, 4.0);
    let s = g.add(mid, both)?;
    Ok(g.offset(s, 4.0))
}

/// Expected model size in bytes.
pub fn expected_model_size(g: &mut Graph, layers: &[(usize, LayerGates)], table: &CostTable) -> Result<Var> {
    let mut parts = Vec::with_capacity(layers.len());
    for (layer, gates) in layers {
        let lookup = |k, e| table.get(*layer, k, e).map(|c| c.param_count as f64);
        for (k, e) in [(3, 3), (3, 6), (5, 3), (5, 6)] {
            lookup(k, e)?;
        }
        let params = expected_block_cost(g, gates, |k, e| lookup(k, e).expect("checked"))?;
        let bits = expected_bits(g, gates)?;
        let prod = g.mul(params, bits)?;
        parts.push(g.scalar_mul(prod, 1.0 / 8.0));
    }
    sum_nodes(g, parts)
}

/// `alpha * ce + beta * lat / lat0 + gamma * ms / ms0`.
pub fn pareto_loss(
    g: &mut Graph,
    ce: Var,
    lat: Var,
    ms: Var,
    coeff: &ParetoCoefficients,
    (lat0, ms0): (f64, f64),
) -> Result<Var> {
    coeff.validate()?;
    if !(lat0 > 0.0 && ms0 > 0.0) {
        return Err(Error::config(format!("normalizers must be positive, got ({lat0}, {ms0})")));
    }
    let a = g.scalar_mul(ce, coeff.alpha);
    let b = g.scalar_mul(lat, coeff.beta / lat0);
    let c = g.scalar_mul(ms, coeff.gamma / ms0);
    let ab = g.add(a, b)?;
    g.add(ab, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn gates(g: &mut Graph, k5: f64, e3: f64, e6: f64, q58: f64, q916: f64) -> LayerGates {
        LayerGates {
            g_k5: g.param(Tensor::scalar(k5)),
            g_e3: g.param(Tensor::scalar(e3)),
            g_e6: g.param(Tensor::scalar(e6)),
            g58: g.param(Tensor::scalar(q58)),
            g916: g.param(Tensor::scalar(q916)),
        }
    }

    fn one_layer_table() -> CostTable {
        let mut t = CostTable::default();
        for (k, e, lat, p) in [(3, 3, 1.0, 1000), (3, 6, 2.0, 2000), (5, 3, 3.0, 3000), (5, 6, 4.0, 4000)] {
            t.insert(0, k, e, CostEntry { latency_ms: lat, param_count: p });
        }
        t
    }

    #[test]
    fn expected_latency_enumeration() {
        let t = one_layer_table();
        let mut g = Graph::new();
        let gt = gates(&mut g, 0.5, 0.5, 0.5, 1.0, 1.0);
        let lat = expected_latency(&mut g, &[(0, gt)], &t).unwrap();
        assert!((g.value(lat).item() - 1.25).abs() < 1e-15);

        let mut g = Graph::new();
        let gt = gates(&mut g, 1.0, 1.0, 1.0, 1.0, 1.0);
        let lat = expected_latency(&mut g, &[(0, gt)], &t).unwrap();
        assert_eq!(g.value(lat).item(), 4.0);

        let mut g = Graph::new();
        let gt = gates(&mut g, 0.7, 1e-12, 0.3, 1.0, 1.0);
        let lat = expected_latency(&mut g, &[(0, gt)], &t).unwrap();
        assert!(g.value(lat).item() < 1e-10);
    }

    #[test]
    fn expected_bits_cases() {
        let mut g = Graph::new();
        let gt = gates(&mut g, 1.0, 1.0, 1.0, 1.0, 1.0);
        let b = expected_bits(&mut g, &gt).unwrap();
        assert_eq!(g.value(b).item(), 16.0);
        let gt = gates(&mut g, 1.0, 1.0, 1.0, 0.0, 0.8);
        let b = expected_bits(&mut g, &gt).unwrap();
        assert_eq!(g.value(b).item(), 4.0);
    }

    #[test]
    fn expected_size_direct_example() {
        let t = one_layer_table();
        let mut g = Graph::new();
        let gt = gates(&mut g, 0.0, 1.0, 0.0, 1.0, 0.0);
        let ms = expected_model_size(&mut g, &[(0, gt)], &t).unwrap();
        assert_eq!(g.value(ms).item(), 1000.0);
    }

    #[test]
    fn missing_entry_names_layer() {
        let t = one_layer_table();
        let mut g = Graph::new();
        let gt = gates(&mut g, 0.5, 0.5, 0.5, 0.5, 0.5);
        match expected_latency(&mut g, &[(3, gt)], &t) {
            Err(Error::Config(msg)) => assert!(msg.contains("layer 3")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn pareto_examples() {
        let mut g = Graph::new();
        let ce = g.scalar(0.9);
        let lat = g.scalar(3.0);
        let ms = g.scalar(7.0);
        let only_ce = pareto_loss(&mut g, ce, lat, ms, &ParetoCoefficients::new(1.0, 0.0, 0.0).unwrap(), (2.0, 5.0)).unwrap();
        assert_eq!(g.value(only_ce).item(), 0.9);

        let zero = g.scalar(0.0);
        let lat0 = g.scalar(2.0);
        let ms0 = g.scalar(5.0);
        let l = pareto_loss(&mut g, zero, lat0, ms0, &ParetoCoefficients::new(0.4, 0.5, 0.1).unwrap(), (2.0, 5.0)).unwrap();
        assert!((g.value(l).item() - 0.6).abs() < 1e-15);

        assert!(ParetoCoefficients::new(0.8, 0.1, 0.1).is_ok());
        assert!(matches!(ParetoCoefficients::new(0.5, 0.5, 0.5), Err(Error::Config(_))));
        assert!(ParetoCoefficients::new(1.2, -0.1, -0.1).is_err());
    }

    #[test]
    fn pareto_is_linear_in_costs() {
        let coeff = ParetoCoefficients::new(0.3, 0.3, 0.4).unwrap();
        let eval = |ce: f64, lat: f64, ms: f64| {
            let mut g = Graph::new();
            let (a, b, c) = (g.scalar(ce), g.scalar(lat), g.scalar(ms));
            let l = pareto_loss(&mut g, a, b, c, &coeff, (3.0, 11.0)).unwrap();
            g.value(l).item()
        };
        let base = eval(0.5, 1.0, 2.0);
        let step = eval(0.5, 2.0, 2.0) - base;
        assert!((eval(0.5, 3.0, 2.0) - base - 2.0 * step).abs() < 1e-12);
        let step = eval(0.5, 1.0, 3.0) - base;
        assert!((eval(0.5, 1.0, 5.0) - base - 3.0 * step).abs() < 1e-12);
    }

    #[test]
    fn synthetic_table_is_valid_and_round_trips() {
        let layers = vec![
            LayerConfig::new(0, 8, 8, 1).unwrap(),
            LayerConfig::new(1, 8, 16, 2).unwrap(),
        ];
        let t = CostTable::synthetic(&layers, (16, 16));
        t.validate(&layers).unwrap();
        assert_eq!(CostTable::parse(&t.to_text()).unwrap(), t);
        // C_in = 24 block: (3,3) = 72*24 + 72*9 + 72*24
        let cfg = LayerConfig::new(0, 24, 24, 1).unwrap();
        assert_eq!(block_param_count(&cfg, 3, 3), 72 * 24 + 72 * 9 + 72 * 24);
        assert_eq!(t.latency(1, BlockChoice::Skip).unwrap(), 0.0);
    }

    #[test]
    fn table_validation_rejects_inverted_costs() {
        let mut t = one_layer_table();
        t.insert(0, 5, 6, CostEntry { latency_ms: 0.5, param_count: 4000 });
        let layers = [LayerConfig::new(0, 1, 1, 1).unwrap()];
        assert!(t.validate(&layers).is_err());
        assert!(CostTable::parse("0 4 3 1.0 10").is_err());
    }
}
