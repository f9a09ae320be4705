//! Experiment driver and report writer behind the `faqs` binary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use faqs::config::RunConfig;
use faqs::engine::{self, Federation, FinalModel, Method};
use faqs::protocol::{self, bits_to_kb, BlockSpec};
use faqs::Result;

/// Communication totals of one method, read from its ledger.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodTotals {
    pub method: String,
    pub per_round_bits: Vec<u64>,
    pub total_bits: u64,
}

impl MethodTotals {
    fn from_federation(name: &str, fed: &Federation) -> Self {
        MethodTotals {
            method: name.into(),
            per_round_bits: fed.round_bits(),
            total_bits: protocol::comm_cost(&fed.ledger, None),
        }
    }

    pub fn mean_round_bits(&self) -> f64 {
        if self.per_round_bits.is_empty() {
            0.0
        } else {
            self.total_bits as f64 / self.per_round_bits.len() as f64
        }
    }
}

/// Multi-path accounting model: every client exchanges all candidate paths of
/// every layer at the summed candidate bit width, both directions, every round.
pub fn edd_model_bits(cfg: &RunConfig) -> Result<Vec<u64>> {
    let per_round: f64 = cfg
        .layers
        .iter()
        .map(|&(c_in, c_out, _)| {
            let spec = BlockSpec { c_in, c_out, ..BlockSpec::default() };
            protocol::block_costs(&spec)[1].bits()
        })
        .sum::<f64>()
        * cfg.clients.len() as f64;
    Ok(vec![per_round.round() as u64; cfg.rounds as usize])
}

pub struct ExperimentReport {
    pub faqs: MethodTotals,
    pub baseline: Option<MethodTotals>,
    pub edd: MethodTotals,
    pub finals: Vec<FinalModel>,
    pub baseline_finals: Vec<FinalModel>,
    pub files: Vec<PathBuf>,
}

impl ExperimentReport {
    /// `baseline / FAQS` on total bits.
    pub fn reduction_ratio(&self) -> Option<f64> {
        let b = self.baseline.as_ref()?;
        (self.faqs.total_bits > 0).then(|| b.total_bits as f64 / self.faqs.total_bits as f64)
    }

    pub fn summary(&self) -> String {
        let mut s = String::from("method          rounds  mean bits/round      total bits   total KB\n");
        let mut row = |t: &MethodTotals| {
            let _ = writeln!(
                s,
                "{:<15} {:>6} {:>16.0} {:>15} {:>10.2}",
                t.method,
                t.per_round_bits.len(),
                t.mean_round_bits(),
                t.total_bits,
                bits_to_kb(t.total_bits)
            );
        };
        row(&self.faqs);
        if let Some(b) = &self.baseline {
            row(b);
        }
        row(&self.edd);
        if let Some(r) = self.reduction_ratio() {
            let _ = writeln!(s, "\nFedAvg / FAQS total bits: {r:.3}");
        }
        if self.faqs.total_bits > 0 {
            let _ = writeln!(
                s,
                "EDD model / FAQS total bits: {:.3}",
                self.edd.total_bits as f64 / self.faqs.total_bits as f64
            );
        }
        s.push_str("\nclient  alpha  beta  gamma  accuracy  search_acc  latency_ms  model_bytes  blocks / bits\n");
        for m in &self.finals {
            let bits = m
                .quant
                .as_ref()
                .map(|q| q.iter().map(|q| q.bits().to_string()).collect::<Vec<_>>().join(" "))
                .unwrap_or_else(|| "32".into());
            let _ = writeln!(
                s,
                "{:>6} {:>6.2} {:>5.2} {:>6.2} {:>9.3} {:>11.3} {:>11.4} {:>12.1}  {} / {}",
                m.client,
                m.coeff.alpha,
                m.coeff.beta,
                m.coeff.gamma,
                m.accuracy,
                m.search_accuracy,
                m.latency_ms,
                m.model_bytes,
                engine::describe_blocks(&m.blocks),
                bits
            );
        }
        if !self.baseline_finals.is_empty() {
            let acc: f64 =
                self.baseline_finals.iter().map(|m| m.accuracy).sum::<f64>() / self.baseline_finals.len() as f64;
            let _ = writeln!(s, "\nFedAvg mean held-out accuracy: {acc:.3}");
        }
        s
    }
}

fn write(dir: &Path, name: &str, body: &str, files: &mut Vec<PathBuf>) -> Result<()> {
    let p = dir.join(name);
    std::fs::write(&p, body).map_err(|e| faqs::Error::Io { context: format!("writing {}", p.display()), source: e })?;
    files.push(p);
    Ok(())
}

fn per_round_csv(t: &MethodTotals) -> String {
    let mut s = String::from("round,bits\n");
    for (r, b) in t.per_round_bits.iter().enumerate() {
        let _ = writeln!(s, "{r},{b}");
    }
    s
}

/// Runs FAQS and, optionally, the FedAvg baseline on the same data and writes every CSV
/// plus `summary.txt` into `out` when given.
pub fn run_experiment(cfg: &RunConfig, with_faqs: bool, with_baseline: bool, out: Option<&Path>) -> Result<ExperimentReport> {
    let mut files = Vec::new();
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)
            .map_err(|e| faqs::Error::Io { context: format!("creating {}", dir.display()), source: e })?;
    }
    let mut faqs_totals = MethodTotals { method: "FAQS".into(), per_round_bits: Vec::new(), total_bits: 0 };
    let mut finals = Vec::new();
    if with_faqs {
        let mut fed = Federation::new(cfg, Method::Faqs)?;
        fed.run()?;
        finals = fed.finetune()?;
        faqs_totals = MethodTotals::from_federation("FAQS", &fed);
        if let Some(dir) = out {
            write(dir, "faqs_metrics.csv", &fed.metrics_csv(), &mut files)?;
            write(dir, "faqs_ledger.csv", &fed.ledger.to_csv(), &mut files)?;
            write(dir, "faqs_rounds.csv", &per_round_csv(&faqs_totals), &mut files)?;
            write(dir, "final_models.csv", &engine::final_models_csv(&finals), &mut files)?;
        }
    }
    let mut baseline = None;
    let mut baseline_finals = Vec::new();
    if with_baseline {
        let mut fed = Federation::new(cfg, Method::fedavg())?;
        fed.run()?;
        baseline_finals = fed.finetune()?;
        let t = MethodTotals::from_federation("FedAvg(MBV2)", &fed);
        if let Some(dir) = out {
            write(dir, "baseline_metrics.csv", &fed.metrics_csv(), &mut files)?;
            write(dir, "baseline_ledger.csv", &fed.ledger.to_csv(), &mut files)?;
            write(dir, "baseline_rounds.csv", &per_round_csv(&t), &mut files)?;
            write(dir, "baseline_models.csv", &engine::final_models_csv(&baseline_finals), &mut files)?;
        }
        baseline = Some(t);
    }
    let edd_rounds = edd_model_bits(cfg)?;
    let edd = MethodTotals { method: "FedNAS+EDD".into(), total_bits: edd_rounds.iter().sum(), per_round_bits: edd_rounds };
    if let Some(dir) = out {
        write(dir, "edd_rounds.csv", &per_round_csv(&edd), &mut files)?;
    }
    let mut report = ExperimentReport { faqs: faqs_totals, baseline, edd, finals, baseline_finals, files };
    if let Some(dir) = out {
        let summary = report.summary();
        let mut files = std::mem::take(&mut report.files);
        write(dir, "summary.txt", &summary, &mut files)?;
        report.files = files;
    }
    Ok(report)
}
