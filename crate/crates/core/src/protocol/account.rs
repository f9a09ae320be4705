use super::ledger::block_comm_bits;
use crate::hwproxy::block_param_count;
use crate::superkernel::LayerConfig;

/// One row of the per-block method comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodCost {
    pub method: String,
    pub gamma: f64,
    pub n_params: f64,
    pub q_bits: f64,
    pub personalized: bool,
}

impl MethodCost {
    pub fn bits(&self) -> f64 {
        block_comm_bits(self.gamma, self.n_params, self.q_bits)
    }

    pub fn kb(&self) -> f64 {
        self.bits() / 8.0 / 1000.0
    }
}

fn row(method: &str, gamma: f64, n: f64, q: f64, personalized: bool) -> MethodCost {
    MethodCost { method: method.into(), gamma, n_params: n, q_bits: q, personalized }
}

/// The published per-block constants for a 24-channel block with ratios {3, 6}.
pub fn published_constants() -> Vec<MethodCost> {
    vec![
        row("FedAvg(MBV2)", 1.0, 9000.0, 32.0, false),
        row("FedNAS+EDD", 1.0, 25000.0, 28.0, true),
        row("FAQS", 0.51, 9000.0, 16.0, true),
    ]
}

/// A single searchable block to account for.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernels: Vec<usize>,
    pub ratios: Vec<usize>,
    pub bit_choices: Vec<u32>,
    pub faqs_gamma: f64,
    pub faqs_bits: f64,
}

impl Default for BlockSpec {
    fn default() -> Self {
        BlockSpec {
            c_in: 24,
            c_out: 24,
            kernels: vec![3, 5],
            ratios: vec![3, 6],
            bit_choices: vec![4, 8, 16],
            faqs_gamma: 0.51,
            faqs_bits: 16.0,
        }
    }
}

/// Counts parameters for a concrete block spec. The multi-path model sums over every
/// candidate path and stores every candidate bit width.
pub fn block_costs(spec: &BlockSpec) -> Vec<MethodCost> {
    let cfg = LayerConfig { index: 0, c_in: spec.c_in, c_out: spec.c_out, stride: 1 };
    let k_min = spec.kernels.iter().copied().min().unwrap_or(3);
    let e_max = spec.ratios.iter().copied().max().unwrap_or(6);
    let mbv2 = block_param_count(&cfg, k_min, e_max) as f64;
    let multipath: u64 = spec
        .kernels
        .iter()
        .flat_map(|&k| spec.ratios.iter().map(move |&e| (k, e)))
        .map(|(k, e)| block_param_count(&cfg, k, e))
        .sum();
    let stored_bits: u32 = spec.bit_choices.iter().sum();
    vec![
        row("FedAvg(MBV2)", 1.0, mbv2, 32.0, false),
        row("FedNAS+EDD", 1.0, multipath as f64, stored_bits as f64, true),
        row("FAQS", spec.faqs_gamma, mbv2, spec.faqs_bits, true),
    ]
}

pub fn format_table(rows: &[MethodCost]) -> String {
    let mut s = format!("{:<14} {:>6} {:>9} {:>6} {:>10}  personalized\n", "method", "gamma", "N", "Q", "Comm(KB)");
    for r in rows {
        s.push_str(&format!(
            "{:<14} {:>6.2} {:>9.0} {:>6.0} {:>10.2}  {}\n",
            r.method,
            r.gamma,
            r.n_params,
            r.q_bits,
            r.kb(),
            if r.personalized { "yes" } else { "no" }
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn published_rows() {
        let kb: Vec<f64> = published_constants().iter().map(MethodCost::kb).collect();
        assert_eq!(kb[0], 72.0);
        assert_eq!(kb[1], 175.0);
        assert!((kb[2] - 18.36).abs() < 1e-9);
    }

    #[test]
    fn counted_block_is_near_published_scale() {
        let rows = block_costs(&BlockSpec::default());
        assert_eq!(rows[0].n_params, 8208.0);
        assert_eq!(rows[1].n_params, 4104.0 + 8208.0 + 5256.0 + 10512.0);
        assert_eq!(rows[1].q_bits, 28.0);
        assert!(rows[2].kb() < rows[0].kb() && rows[0].kb() < rows[1].kb());
    }
}
