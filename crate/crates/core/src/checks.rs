//! Randomized property checks shared by the integration tests and the acceptance run.
//!
//! Every check returns a [`CheckReport`] instead of panicking so callers can print
//! one line per property and decide how to fail.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{gradient_mismatch, Graph, Tensor, Var};
use crate::error::Result;
use crate::hwproxy::{self, CostTable, ParetoCoefficients};
use crate::model::{NetMode, NetVars, Network};
use crate::protocol::{
    self, aggregate_decoded, layer_values_from_fn, wire, DecodedUpdate, DenseValues, LayerValues, Precision,
    SelectedIndices,
};
use crate::quant::{self, QuantChoice, QuantState, QuantThresholds};
use crate::superkernel::{
    ArchMode, BlockChoice, BlockMasks, ChannelHalf, KernelRegion, LayerConfig, QuantMode, Spatial, SuperKernelLayer,
};

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: &'static str,
    pub trials: usize,
    pub failures: Vec<String>,
    /// Samples dropped because the property does not apply there.
    pub skipped: usize,
}

impl CheckReport {
    fn new(name: &'static str) -> Self {
        CheckReport { name, trials: 0, failures: Vec::new(), skipped: 0 }
    }

    fn record(&mut self, ok: bool, detail: impl FnOnce() -> String) {
        self.trials += 1;
        if !ok {
            self.failures.push(detail());
        }
    }

    pub fn passed(&self) -> bool {
        self.trials > 0 && self.failures.is_empty()
    }

    pub fn summary(&self) -> String {
        let skipped = if self.skipped > 0 { format!(", {} samples skipped", self.skipped) } else { String::new() };
        match self.failures.first() {
            None => format!("{}: {} trials, 0 failures{skipped}", self.name, self.trials),
            Some(f) => format!(
                "{}: {} trials, {} failures{skipped} (first: {f})",
                self.name,
                self.trials,
                self.failures.len()
            ),
        }
    }
}

fn rel_diff(a: &Tensor, b: &Tensor) -> f64 {
    let num: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den = b.squared_l2().sqrt().max(a.squared_l2().sqrt());
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

fn random_tensor(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

// ---------------------------------------------------------------------------
// gradients

// five-point stencil: truncation O(h^4), roundoff about eps / h
const FD_STEP: f64 = 1e-5;
const FD_REL: f64 = 1e-4;
const FD_ABS: f64 = 1e-7;

/// Every trainable slot of a network in a fixed order, with its graph handle.
fn slots<'a>(net: &'a mut Network, v: &NetVars) -> Vec<(String, Var, &'a mut [f64], bool)> {
    let mut out: Vec<(String, Var, &mut [f64], bool)> = vec![
        ("stem_weight".into(), v.stem_weight, net.stem_weight.data_mut(), false),
        ("stem_bias".into(), v.stem_bias, net.stem_bias.data_mut(), false),
        ("head_weight".into(), v.head_weight, net.head_weight.data_mut(), false),
        ("head_bias".into(), v.head_bias, net.head_bias.data_mut(), false),
    ];
    for (i, (l, lv)) in net.layers.iter_mut().zip(&v.layers).enumerate() {
        // the last flag marks weights that are quantized in the search pass
        let named: Vec<(&str, Var, &mut [f64], bool)> = vec![
            ("expand_weight", lv.expand_weight, l.expand_weight.data_mut(), true),
            ("expand_scale", lv.expand_scale, l.expand_affine.scale.data_mut(), false),
            ("expand_shift", lv.expand_shift, l.expand_affine.shift.data_mut(), false),
            ("dw_weight", lv.dw_weight, l.dw_weight.data_mut(), true),
            ("dw_scale", lv.dw_scale, l.dw_affine.scale.data_mut(), false),
            ("dw_shift", lv.dw_shift, l.dw_affine.shift.data_mut(), false),
            ("project_weight", lv.project_weight, l.project_weight.data_mut(), true),
            ("project_scale", lv.project_scale, l.project_affine.scale.data_mut(), false),
            ("project_shift", lv.project_shift, l.project_affine.shift.data_mut(), false),
            ("t_k5", lv.t_k5, std::slice::from_mut(&mut l.arch.t_k5), false),
            ("t_e3", lv.t_e3, std::slice::from_mut(&mut l.arch.t_e3), false),
            ("t_e6", lv.t_e6, std::slice::from_mut(&mut l.arch.t_e6), false),
            ("t_q58", lv.t_q58, std::slice::from_mut(&mut l.quant.t_q58), false),
            ("t_q916", lv.t_q916, std::slice::from_mut(&mut l.quant.t_q916), false),
        ];
        out.extend(named.into_iter().map(|(n, var, s, q)| (format!("layer{i}.{n}"), var, s, q)));
    }
    out
}

struct Problem {
    x: Tensor,
    labels: Vec<usize>,
    coeff: ParetoCoefficients,
    table: CostTable,
    norms: (f64, f64),
}

fn pareto_objective(net: &Network, p: &Problem, mode: &NetMode) -> Result<(Graph, Var, NetVars)> {
    let mut g = Graph::new();
    let v = net.register(&mut g);
    let x = g.constant(p.x.clone());
    let f = net.forward(&mut g, &v, x, mode)?;
    let ce = g.softmax_cross_entropy(f.logits, &p.labels)?;
    let lat = hwproxy::expected_latency(&mut g, &f.gates, &p.table)?;
    let ms = hwproxy::expected_model_size(&mut g, &f.gates, &p.table)?;
    let loss = hwproxy::pareto_loss(&mut g, ce, lat, ms, &p.coeff, p.norms)?;
    Ok((g, loss, v))
}

fn random_problem(rng: &mut ChaCha8Rng) -> Result<(Network, Problem)> {
    let c0 = rng.random_range(1..=2);
    let c2 = rng.random_range(1..=3);
    let stride = rng.random_range(1..=2);
    let plan = vec![LayerConfig::new(0, c0, c0, 1)?, LayerConfig::new(1, c0, c2, stride)?];
    let (img_c, hw, n, classes) = (2, 4, 2, 3);
    let mut net = Network::init(&plan, img_c, classes, rng)?;
    for l in &mut net.layers {
        for a in [&mut l.expand_affine, &mut l.dw_affine, &mut l.project_affine] {
            a.scale.data_mut().iter_mut().for_each(|s| *s = rng.random_range(0.7..1.3));
            a.shift.data_mut().iter_mut().for_each(|s| *s = rng.random_range(-0.2..0.2));
        }
        // move every gate off 0.5 while keeping it in the sigmoid's linear range
        for t in [&mut l.arch.t_k5, &mut l.arch.t_e3, &mut l.arch.t_e6, &mut l.quant.t_q58, &mut l.quant.t_q916] {
            *t *= rng.random_range(0.8..1.2);
        }
    }
    net.head_bias.data_mut().iter_mut().for_each(|b| *b = rng.random_range(-0.3..0.3));
    let x = random_tensor(&[n, img_c, hw, hw], 1.0, rng);
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    let a: f64 = rng.random_range(0.2..1.0);
    let b: f64 = rng.random_range(0.0..(1.0 - a));
    let coeff = ParetoCoefficients::new(a, b, 1.0 - a - b)?;
    let table = CostTable::synthetic(&plan, (hw, hw));
    let norms = table.normalizers(&plan)?;
    Ok((net, Problem { x, labels, coeff, table, norms }))
}

/// Finite-difference gradient checks of the full Pareto objective. Each trial draws
/// a two-layer network and checks sampled coordinates of every slot twice: on
/// full-precision weights (all slots) and through bit-sharing quantization (every
/// slot except the straight-through quantized weights). A coordinate whose stencil
/// straddles a ReLU6 corner gives different estimates at two step sizes; it is
/// counted as skipped rather than compared.
pub fn gradient_trials(trials: usize, seed: u64) -> CheckReport {
    let mut report = CheckReport::new("gradient finite differences");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kinks = 0usize;
    for trial in 0..trials {
        let outcome = (|| -> Result<Option<String>> {
            let (net, p) = random_problem(&mut rng)?;
            for mode in [NetMode::SearchFloat, NetMode::Search] {
                let (g, loss, v) = pareto_objective(&net, &p, &mode)?;
                let grads = g.backward(loss)?;
                let mut probe = net.clone();
                let count = slots(&mut probe, &v).len();
                for k in 0..count {
                    let (name, var, len, quantized) = {
                        let s = slots(&mut probe, &v);
                        (s[k].0.clone(), s[k].1, s[k].2.len(), s[k].3)
                    };
                    if quantized && mode == NetMode::Search {
                        continue;
                    }
                    let picks: Vec<usize> = if len <= 6 {
                        (0..len).collect()
                    } else {
                        (0..6).map(|_| rng.random_range(0..len)).collect()
                    };
                    let analytic_all = grads.get(var).cloned().unwrap_or_else(|| Tensor::zeros(&[len]));
                    let mut analytic = Vec::with_capacity(picks.len());
                    let mut numeric = Vec::with_capacity(picks.len());
                    let mut kept = Vec::with_capacity(picks.len());
                    for &i in &picks {
                        let eval = |delta: f64| -> Result<f64> {
                            let mut n2 = net.clone();
                            slots(&mut n2, &v)[k].2[i] += delta;
                            let (g2, l2, _) = pareto_objective(&n2, &p, &mode)?;
                            Ok(g2.value(l2).item())
                        };
                        let stencil = |h: f64| -> Result<f64> {
                            Ok((-eval(2.0 * h)? + 8.0 * eval(h)? - 8.0 * eval(-h)? + eval(-2.0 * h)?) / (12.0 * h))
                        };
                        let coarse = stencil(FD_STEP)?;
                        let fine = stencil(FD_STEP / 4.0)?;
                        if (coarse - fine).abs() > 1e-5 * coarse.abs().max(fine.abs()) + 1e-9 {
                            kinks += 1;
                            continue;
                        }
                        numeric.push(coarse);
                        analytic.push(analytic_all.data()[i]);
                        kept.push(i);
                    }
                    if analytic.is_empty() {
                        continue;
                    }
                    let a = Tensor::new(vec![analytic.len()], analytic)?;
                    let n = Tensor::new(vec![numeric.len()], numeric)?;
                    if let Some((j, av, nv)) = gradient_mismatch(&a, &n, FD_REL, FD_ABS) {
                        return Ok(Some(format!(
                            "trial {trial} {mode:?} {name}[{}]: analytic {av:.6e} numeric {nv:.6e}",
                            kept[j]
                        )));
                    }
                }
            }
            Ok(None)
        })();
        match outcome {
            Ok(failure) => report.record(failure.is_none(), || failure.unwrap_or_default()),
            Err(e) => report.record(false, || format!("trial {trial}: {e}")),
        }
    }
    report.skipped = kinks;
    report
}

// ---------------------------------------------------------------------------
// quantization algebra

fn random_weights(rng: &mut ChaCha8Rng) -> Tensor {
    let n = rng.random_range(2..200);
    let scale = 10f64.powf(rng.random_range(-3.0..1.0));
    let offset = rng.random_range(-1.0..1.0) * scale;
    Tensor::from_fn(&[n], |_| offset + rng.random_range(-scale..scale))
}

pub fn quant_band_completeness(trials: usize, seed: u64) -> CheckReport {
    let mut report = CheckReport::new("band completeness");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..trials {
        let w = random_weights(&mut rng);
        let q = QuantState::encode(&w);
        let b = q.band_values();
        let decoded = q.decode();
        let worst = (0..w.len())
            .map(|i| (b.v14.data()[i] + b.v58.data()[i] + b.v916.data()[i] - decoded.data()[i]).abs())
            .fold(0.0, f64::max);
        report.record(worst <= 1e-12, || format!("trial {trial}: residual {worst:.3e}"));
    }
    report
}

/// Reconstruction error never grows with the width, for both rounding and truncation.
pub fn quant_monotonicity(trials: usize, seed: u64) -> CheckReport {
    let mut report = CheckReport::new("reconstruction-error monotonicity");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let err = |w: &Tensor, q: &Tensor| w.data().iter().zip(q.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    for trial in 0..trials {
        let w = random_weights(&mut rng);
        let rounded: Vec<f64> = [4, 8, 16].iter().map(|&b| err(&w, &quant::quantize(&w, b).expect("valid width"))).collect();
        let truncated: Vec<f64> = [QuantChoice::Bits4, QuantChoice::Bits8, QuantChoice::Bits16]
            .iter()
            .map(|&c| err(&w, &quant::apply_hard_quant(&w, c)))
            .collect();
        let ok = |e: &[f64]| e[0] + 1e-15 >= e[1] && e[1] + 1e-15 >= e[2];
        report.record(ok(&rounded) && ok(&truncated), || {
            format!("trial {trial}: rounded {rounded:?} truncated {truncated:?}")
        });
    }
    report
}

pub fn quant_idempotence(trials: usize, seed: u64) -> CheckReport {
    let mut report = CheckReport::new("quantization idempotence");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..trials {
        let w = random_weights(&mut rng);
        let mut worst = 0.0f64;
        for b in [4, 8, 16] {
            let once = quant::quantize(&w, b).expect("valid width");
            let twice = quant::quantize(&once, b).expect("valid width");
            let scale = once.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
            let d = once.data().iter().zip(twice.data()).map(|(a, c)| (a - c).abs()).fold(0.0, f64::max) / scale;
            worst = worst.max(d);
        }
        report.record(worst <= 1e-12, || format!("trial {trial}: relative drift {worst:.3e}"));
    }
    report
}

/// Bit-sharing with saturated gates against hard truncation at the matching width.
pub fn quant_hard_soft(trials: usize, seed: u64) -> CheckReport {
    let mut report = CheckReport::new("bit-sharing hard/soft consistency");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..trials {
        let w = random_weights(&mut rng);
        let (n58, n916) = quant::band_norms(&[&w]);
        let margin = rng.random_range(15.0..40.0);
        let mut worst = 0.0f64;
        for (s58, s916, choice) in [
            (-1.0, -1.0, QuantChoice::Bits4),
            (-1.0, 1.0, QuantChoice::Bits4),
            (1.0, -1.0, QuantChoice::Bits8),
            (1.0, 1.0, QuantChoice::Bits16),
        ] {
            let t = QuantThresholds { t_q58: n58 - s58 * margin, t_q916: n916 - s916 * margin };
            let (soft, _) = quant::compose_bitsharing(&w, &t);
            let hard = quant::apply_hard_quant(&w, choice);
            if quant::select_quant(&[&w], &t) != choice {
                worst = f64::INFINITY;
            }
            worst = worst.max(rel_diff(&soft, &hard));
        }
        report.record(worst <= 1e-4, || format!("trial {trial}: relative error {worst:.3e}"));
    }
    report
}

pub fn quant_trials(trials: usize, seed: u64) -> Vec<CheckReport> {
    vec![
        quant_band_completeness(trials, seed),
        quant_monotonicity(trials, seed + 1),
        quant_idempotence(trials, seed + 2),
        quant_hard_soft(trials, seed + 3),
    ]
}

// ---------------------------------------------------------------------------
// decision tables

/// Every sign pattern of the architecture and bit-width indicators, checked on the
/// pure mapping and on a layer whose thresholds realize the pattern.
pub fn decision_tables(seed: u64) -> Vec<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut arch = CheckReport::new("block selection table (8 sign patterns)");
    let expected_arch = |e3: bool, e6: bool, k5: bool| match (e3, e6, k5) {
        (true, true, true) => BlockChoice::K5E6,
        (true, true, false) => BlockChoice::K3E6,
        (true, false, true) => BlockChoice::K5E3,
        (true, false, false) => BlockChoice::K3E3,
        (false, _, _) => BlockChoice::Skip,
    };
    let layer = SuperKernelLayer::init(LayerConfig::new(0, 2, 2, 1).expect("valid layer"), &mut rng);
    for pattern in 0..8u8 {
        let (e3, e6, k5) = (pattern & 4 != 0, pattern & 2 != 0, pattern & 1 != 0);
        let mag = |r: &mut ChaCha8Rng| r.random_range(1e-3..10.0);
        let sign = |p: bool| if p { 1.0 } else { -1.0 };
        let from_values = BlockChoice::from_indicators(sign(e3) * mag(&mut rng), sign(e6) * mag(&mut rng), sign(k5) * mag(&mut rng));
        let at_zero = BlockChoice::from_indicators(
            if e3 { 0.0 } else { -1.0 },
            if e6 { 0.0 } else { -1.0 },
            if k5 { 0.0 } else { -1.0 },
        );
        let mut l = layer.clone();
        let ids = l.indicators();
        // the ring norm enters the first-half norm, so fix k5 first
        l.arch.t_k5 += ids.id_k5 - sign(k5) * 0.5;
        let ids = l.indicators();
        l.arch.t_e3 += ids.id_e3 - sign(e3) * 0.5;
        l.arch.t_e6 += ids.id_e6 - sign(e6) * 0.5;
        let want = expected_arch(e3, e6, k5);
        let got = [from_values, at_zero, l.select_block()];
        arch.record(got.iter().all(|&b| b == want), || format!("pattern {pattern:03b}: got {got:?}, want {want}"));
    }

    let mut bits = CheckReport::new("bit-width table (4 sign patterns)");
    let w = random_weights(&mut rng);
    let (n58, n916) = quant::band_norms(&[&w]);
    for pattern in 0..4u8 {
        let (p58, p916) = (pattern & 2 != 0, pattern & 1 != 0);
        let want = match (p58, p916) {
            (true, true) => QuantChoice::Bits16,
            (true, false) => QuantChoice::Bits8,
            (false, _) => QuantChoice::Bits4,
        };
        let sign = |p: bool| if p { 1.0 } else { -1.0 };
        let from_values = quant::select_from_indicators(sign(p58) * 0.25, sign(p916) * 3.0);
        let at_zero = quant::select_from_indicators(if p58 { 0.0 } else { -1.0 }, if p916 { 0.0 } else { -1.0 });
        let t = QuantThresholds {
            t_q58: n58 - sign(p58) * (n58.abs() * 0.1 + 1e-9),
            t_q916: n916 - sign(p916) * (n916.abs() * 0.1 + 1e-9),
        };
        let got = [from_values, at_zero, quant::select_quant(&[&w], &t)];
        bits.record(got.iter().all(|&q| q == want), || format!("pattern {pattern:02b}: got {got:?}, want {want:?}"));
    }

    let mut soft = CheckReport::new("saturated soft block equals discrete block");
    for block in BlockChoice::ALL {
        let cfg = LayerConfig::new(0, 2, 2, 1).expect("valid layer");
        let l = SuperKernelLayer::init(cfg, &mut rng);
        let x = random_tensor(&[2, 2, 5, 5], 1.0, &mut rng);
        let eps = 1e-7;
        let on = |b: bool| if b { 1.0 - eps } else { eps };
        let forced = ArchMode::Forced {
            g_k5: on(block.kernel() == Some(5)),
            g_e3: on(!block.is_skip()),
            g_e6: on(block.ratio() == Some(6)),
        };
        let run = |mode: ArchMode| -> Result<Tensor> {
            let mut g = Graph::new();
            let v = l.register_constants(&mut g);
            let xv = g.constant(x.clone());
            let (out, _) = l.forward(&mut g, &v, xv, mode, QuantMode::Off)?;
            Ok(g.value(out).clone())
        };
        match (run(forced), run(ArchMode::Fixed(block))) {
            (Ok(a), Ok(b)) => {
                let d = rel_diff(&a, &b);
                soft.record(d <= 1e-4, || format!("{block}: relative error {d:.3e}"));
            }
            (a, b) => soft.record(false, || format!("{block}: {:?} / {:?}", a.err(), b.err())),
        }
    }
    vec![arch, bits, soft]
}

// ---------------------------------------------------------------------------
// protocol

fn random_network(rng: &mut ChaCha8Rng) -> Network {
    let c0 = rng.random_range(1..=4);
    let c1 = rng.random_range(1..=5);
    let plan = vec![
        LayerConfig::new(0, c0, c0, 1).expect("valid layer"),
        LayerConfig::new(1, c0, c1, 2).expect("valid layer"),
        LayerConfig::new(2, c1, c1, 1).expect("valid layer"),
    ];
    let mut net = Network::init(&plan, 3, 3, rng).expect("valid plan");
    for l in &mut net.layers {
        for t in [&mut l.arch.t_k5, &mut l.arch.t_e3, &mut l.arch.t_e6, &mut l.quant.t_q58, &mut l.quant.t_q916] {
            *t *= rng.random_range(0.5..1.5);
        }
    }
    net
}

/// Serialize/deserialize identity and bit conservation on random masked and
/// baseline messages.
pub fn protocol_round_trips(trials: usize, seed: u64) -> CheckReport {
    let mut report = CheckReport::new("wire round trip and bit conservation");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..trials {
        let net = random_network(&mut rng);
        let id = rng.random_range(0..u16::MAX);
        let round = rng.random_range(0..1000);
        let msgs = [
            protocol::masked_upload(&net, id, round),
            protocol::baseline_upload(&net, BlockChoice::K3E6, id, round),
        ];
        for msg in msgs {
            let bytes = wire::serialize(&msg);
            let back = wire::deserialize(&bytes);
            let counted = protocol::message_bits(&msg) + wire::overhead_bits(&msg);
            let ok = back.as_ref().is_ok_and(|b| *b == msg) && bytes.len() as u64 * 8 == counted;
            report.record(ok, || format!("trial {trial}: {} bytes, {counted} bits counted", bytes.len()));
        }
    }
    report
}

fn dense_stub(seed: f64) -> DenseValues {
    DenseValues {
        stem_dims: (4, 3),
        head_dims: (3, 4),
        stem_weight: (0..12).map(|i| seed + i as f64).collect(),
        stem_bias: vec![seed; 4],
        head_weight: (0..12).map(|i| seed * i as f64).collect(),
        head_bias: vec![-seed; 3],
    }
}

/// With every client on the same block at full precision the masked aggregate is
/// the plain per-element mean.
pub fn protocol_full_mask_fedavg(trials: usize, seed: u64) -> CheckReport {
    let mut report = CheckReport::new("full masks reduce to FedAvg");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = LayerConfig::new(0, 4, 4, 1).expect("valid layer");
    for trial in 0..trials {
        let k = rng.random_range(1..=6);
        let block = BlockChoice::ALL[rng.random_range(0..5)];
        let salt: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let ups: Vec<DecodedUpdate> = salt
            .iter()
            .enumerate()
            .map(|(c, &s)| DecodedUpdate {
                client_id: c as u16,
                round: 0,
                layers: vec![(
                    layer_values_from_fn(&cfg, block, move |i| (s * (i as f64 + 1.0)).sin()),
                    Precision::Float32,
                )],
                dense: (dense_stub(s), Precision::Float32),
            })
            .collect();
        let result = aggregate_decoded(&ups);
        let worst = match &result {
            Ok(pulls) => {
                let mut worst = 0.0f64;
                for pull in pulls {
                    let (l, _) = &pull.layers[0];
                    let fields = |u: &LayerValues| -> Vec<f64> {
                        [&u.expand, &u.depthwise, &u.project, &u.affine].iter().flat_map(|v| v.iter().copied()).collect()
                    };
                    let got = fields(l);
                    for (j, &v) in got.iter().enumerate() {
                        let mean = ups.iter().map(|u| fields(&u.layers[0].0)[j]).sum::<f64>() / k as f64;
                        worst = worst.max((v - mean).abs());
                    }
                    for (j, &v) in pull.dense.0.head_weight.iter().enumerate() {
                        let mean = ups.iter().map(|u| u.dense.0.head_weight[j]).sum::<f64>() / k as f64;
                        worst = worst.max((v - mean).abs());
                    }
                }
                worst
            }
            Err(_) => f64::INFINITY,
        };
        report.record(worst <= 1e-12, || format!("trial {trial}: {k} clients {block}: max error {worst:.3e}"));
    }
    report
}

/// Clients on (3,3), (3,6) and (5,6): every depthwise entry and expand/project
/// channel is the mean over exactly the clients whose block contains it.
pub fn protocol_three_client_overlap() -> CheckReport {
    let mut report = CheckReport::new("three-client overlap means");
    let cfg = LayerConfig::new(0, 4, 4, 1).expect("valid layer");
    let blocks = [BlockChoice::K3E3, BlockChoice::K3E6, BlockChoice::K5E6];
    let value = |client: usize, i: usize| (client + 1) as f64 * 1000.0 + i as f64;
    let ups: Vec<DecodedUpdate> = blocks
        .iter()
        .enumerate()
        .map(|(c, &b)| DecodedUpdate {
            client_id: c as u16,
            round: 0,
            layers: vec![(layer_values_from_fn(&cfg, b, move |i| value(c, i)), Precision::Float32)],
            dense: (dense_stub(c as f64), Precision::Float32),
        })
        .collect();
    let pulls = match aggregate_decoded(&ups) {
        Ok(p) => p,
        Err(e) => {
            report.record(false, || e.to_string());
            return report;
        }
    };
    let members = |pick: &dyn Fn(&SelectedIndices) -> &Vec<usize>, i: usize| -> Vec<usize> {
        (0..3).filter(|&c| pick(&SelectedIndices::new(&cfg, blocks[c])).contains(&i)).collect()
    };
    let centre_first = KernelRegion { spatial: Spatial::Center3x3, channels: ChannelHalf::First };
    let centre_second = KernelRegion { spatial: Spatial::Center3x3, channels: ChannelHalf::Second };
    let region = |i: usize| {
        KernelRegion::ALL
            .into_iter()
            .find(|r| BlockMasks::depthwise_region_mask(&cfg, *r)[i])
            .expect("regions partition the kernel")
    };
    for (c, pull) in pulls.iter().enumerate() {
        let ix = SelectedIndices::new(&cfg, blocks[c]);
        let (l, _) = &pull.layers[0];
        let parts: [(&str, &Vec<usize>, &Vec<f64>, fn(&SelectedIndices) -> &Vec<usize>); 3] = [
            ("expand", &ix.expand, &l.expand, |s| &s.expand),
            ("depthwise", &ix.depthwise, &l.depthwise, |s| &s.depthwise),
            ("project", &ix.project, &l.project, |s| &s.project),
        ];
        for (name, idx, vals, pick) in parts {
            for (&i, &v) in idx.iter().zip(vals) {
                let who = members(&pick, i);
                if name == "depthwise" {
                    let want: Vec<usize> = match region(i) {
                        r if r == centre_first => vec![0, 1, 2],
                        r if r == centre_second => vec![1, 2],
                        _ => vec![2],
                    };
                    if who != want {
                        report.record(false, || format!("{name}[{i}] contributed by {who:?}, expected {want:?}"));
                        continue;
                    }
                }
                let mean = who.iter().map(|&m| value(m, i)).sum::<f64>() / who.len() as f64;
                report.record((v - mean).abs() <= 1e-12, || format!("client {c} {name}[{i}]: {v} vs {mean}"));
            }
        }
        report.record(l.thresholds == ups[c].layers[0].0.thresholds, || format!("client {c}: thresholds not echoed"));
    }
    report
}

pub fn protocol_trials(trials: usize, seed: u64) -> Vec<CheckReport> {
    vec![
        protocol_round_trips(trials, seed),
        protocol_full_mask_fedavg(trials, seed + 1),
        protocol_three_client_overlap(),
    ]
}
