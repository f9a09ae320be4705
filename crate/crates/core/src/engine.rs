//! Round orchestration: parallel local search, masked aggregation and pull,
//! final per-client finetuning, and the fixed-architecture FedAvg baseline.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Graph;
use crate::config::RunConfig;
use crate::data::{self, Dataset, PartitionSpec};
use crate::error::{Error, Result};
use crate::hwproxy::{self, CostTable, ParetoCoefficients};
use crate::model::{NetMode, Network};
use crate::protocol::{self, wire, CommLedger, Direction, MaskedUpdate};
use crate::quant::QuantChoice;
use crate::superkernel::{ArchMode, BlockChoice, QuantMode};

/// Which protocol a federation runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    /// Joint architecture and bit-width search with masked transmission.
    Faqs,
    /// Every layer fixed to `block`, full-precision weights, no thresholds.
    FedAvg { block: BlockChoice },
}

impl Method {
    pub fn fedavg() -> Self {
        Method::FedAvg { block: BlockChoice::K3E6 }
    }
}

#[derive(Clone, Debug)]
pub struct ClientState {
    pub id: u16,
    pub coeff: ParetoCoefficients,
    pub net: Network,
    pub train: Vec<usize>,
    pub holdout: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub round: u32,
    pub client: u16,
    pub train_loss: f64,
    pub accuracy: f64,
    pub expected_lat: f64,
    pub expected_ms: f64,
    pub bits_uploaded: u64,
    pub bits_pulled: u64,
}

#[derive(Clone, Debug)]
pub struct FinalModel {
    pub client: u16,
    pub coeff: ParetoCoefficients,
    pub blocks: Vec<BlockChoice>,
    /// `None` for full-precision baseline models.
    pub quant: Option<Vec<QuantChoice>>,
    pub net: Network,
    pub accuracy: f64,
    /// Held-out accuracy of the model as it stood when search ended.
    pub search_accuracy: f64,
    pub latency_ms: f64,
    pub model_bytes: f64,
}

/// Counter-based per-client stream: distinct for every `(seed, client, round, purpose)`.
pub fn client_seed(seed: u64, client: u16, round: u32, purpose: u64) -> u64 {
    let mut z = seed
        ^ (client as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (round as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ purpose.wrapping_mul(0x1656_67B1_9E37_79F9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const FINETUNE_ROUND: u32 = u32::MAX;
const EVAL_BATCH: usize = 64;

/// Fraction of `indices` classified correctly under `mode`.
pub fn accuracy(net: &Network, data: &Dataset, indices: &[usize], mode: &NetMode) -> Result<f64> {
    if indices.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for chunk in indices.chunks(EVAL_BATCH) {
        let (x, labels) = data.batch(chunk);
        let mut g = Graph::new();
        let v = net.register(&mut g);
        let xv = g.constant(x);
        let f = net.forward(&mut g, &v, xv, mode)?;
        let logits = g.value(f.logits);
        let k = logits.shape()[1];
        for (row, &l) in logits.data().chunks(k).zip(&labels) {
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .expect("classes");
            correct += (best == l) as usize;
        }
    }
    Ok(correct as f64 / indices.len() as f64)
}

/// Expected latency and model size of the soft architecture as it stands.
pub fn proxy_values(net: &Network, table: &CostTable) -> Result<(f64, f64)> {
    let mut g = Graph::new();
    let mut gates = Vec::with_capacity(net.layers.len());
    for l in &net.layers {
        let v = l.register_constants(&mut g);
        let c = l.compose(&mut g, &v, ArchMode::Soft, QuantMode::BitSharing)?;
        gates.push((l.config.index, c.gates));
    }
    let lat = hwproxy::expected_latency(&mut g, &gates, table)?;
    let ms = hwproxy::expected_model_size(&mut g, &gates, table)?;
    Ok((g.value(lat).item(), g.value(ms).item()))
}

/// Latency and byte size of a discrete architecture (`None` bits means 32-bit floats).
pub fn architecture_cost(
    table: &CostTable,
    blocks: &[BlockChoice],
    quant: Option<&[QuantChoice]>,
) -> Result<(f64, f64)> {
    let arch: Vec<(usize, BlockChoice)> = blocks.iter().copied().enumerate().collect();
    let lat = table.architecture_latency(&arch)?;
    let ms = match quant {
        Some(q) => {
            let a: Vec<_> = blocks.iter().zip(q).enumerate().map(|(i, (&b, &q))| (i, b, q)).collect();
            table.architecture_size(&a)?
        }
        None => arch
            .iter()
            .map(|&(i, b)| Ok(table.param_count(i, b)? as f64 * 4.0))
            .sum::<Result<f64>>()?,
    };
    Ok((lat, ms))
}

pub struct Federation {
    pub config: RunConfig,
    pub method: Method,
    pub data: Dataset,
    pub table: CostTable,
    pub normalizers: (f64, f64),
    pub clients: Vec<ClientState>,
    pub ledger: CommLedger,
    pub metrics: Vec<MetricRow>,
    pub rounds_done: u32,
    /// Every message of the most recent round as the receiver decoded it.
    pub last_messages: Vec<(Direction, MaskedUpdate)>,
}

struct LocalResult {
    update: MaskedUpdate,
    loss: f64,
}

impl Federation {
    pub fn new(config: &RunConfig, method: Method) -> Result<Self> {
        config.validate()?;
        let data = match &config.dataset {
            Some(path) => data::read_flat(path)?,
            None => {
                let mut spec = data::SyntheticSpec::new(
                    config.num_classes,
                    config.samples_per_class,
                    config.image_size,
                    config.image_size,
                    config.seed,
                );
                spec.channels = config.image_channels;
                spec.noise = config.noise;
                spec.generate()?
            }
        };
        Self::with_dataset(config, method, data)
    }

    pub fn with_dataset(config: &RunConfig, method: Method, data: Dataset) -> Result<Self> {
        config.validate()?;
        let plan = config.layer_plan()?;
        let (c, h, w) = data.image_dims();
        let table = match &config.cost_table {
            Some(p) => CostTable::load(p)?,
            None => CostTable::synthetic(&plan, (h, w)),
        };
        table.validate(&plan)?;
        let normalizers = table.normalizers(&plan)?;
        let k = config.clients.len();
        let mut spec = PartitionSpec::new(k, config.lda_alpha, config.seed);
        spec.min_samples = data.len() / (2 * k);
        let parts = data::lda_partition(&data.labels, data.num_classes, &spec)?;
        let parts = data::equalize(&parts, client_seed(config.seed, 0, 0, 1));
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let net = Network::init(&plan, c, data.num_classes, &mut rng)?;
        let clients = parts
            .iter()
            .zip(&config.clients)
            .enumerate()
            .map(|(i, (p, coeff))| {
                let (train, holdout) =
                    data::holdout_split(p, config.holdout_fraction, client_seed(config.seed, i as u16, 0, 2));
                ClientState { id: i as u16, coeff: *coeff, net: net.clone(), train, holdout }
            })
            .collect();
        Ok(Federation {
            config: config.clone(),
            method,
            data,
            table,
            normalizers,
            clients,
            ledger: CommLedger::new(),
            metrics: Vec::new(),
            rounds_done: 0,
            last_messages: Vec::new(),
        })
    }

    fn fixed_mode(&self) -> Option<NetMode> {
        match self.method {
            Method::Faqs => None,
            Method::FedAvg { block } => Some(NetMode::Fixed { blocks: vec![block; self.config.layers.len()], quant: None }),
        }
    }

    fn eval_mode(&self) -> NetMode {
        self.fixed_mode().unwrap_or(NetMode::Search)
    }

    /// Local training for one client followed by its masked (or full) upload.
    fn local_search(&self, client: &mut ClientState, round: u32) -> Result<LocalResult> {
        let cfg = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(client_seed(cfg.seed, client.id, round, 0));
        let mode = self.eval_mode();
        let mut order = client.train.clone();
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for _ in 0..cfg.local_epochs {
            order.shuffle(&mut rng);
            loss_sum = 0.0;
            batches = 0;
            for chunk in order.chunks(cfg.batch_size) {
                let (x, labels) = self.data.batch(chunk);
                let mut g = Graph::new();
                let v = client.net.register(&mut g);
                let xv = g.constant(x);
                let f = client.net.forward(&mut g, &v, xv, &mode)?;
                let ce = g.softmax_cross_entropy(f.logits, &labels)?;
                let loss = match self.method {
                    Method::Faqs => {
                        let lat = hwproxy::expected_latency(&mut g, &f.gates, &self.table)?;
                        let ms = hwproxy::expected_model_size(&mut g, &f.gates, &self.table)?;
                        hwproxy::pareto_loss(&mut g, ce, lat, ms, &client.coeff, self.normalizers)?
                    }
                    Method::FedAvg { .. } => ce,
                };
                let value = g.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::Diverged { round, client: client.id, detail: format!("loss is {value}") });
                }
                let grads = g.backward(loss)?;
                client.net.apply_gradients(&v, &grads, cfg.lr_w, cfg.lr_t);
                if !client.net.all_finite() {
                    return Err(Error::Diverged {
                        round,
                        client: client.id,
                        detail: "non-finite parameters after update".into(),
                    });
                }
                loss_sum += value;
                batches += 1;
            }
        }
        let update = match self.method {
            Method::Faqs => protocol::masked_upload(&client.net, client.id, round),
            Method::FedAvg { block } => protocol::baseline_upload(&client.net, block, client.id, round),
        };
        let loss = if batches == 0 { f64::NAN } else { loss_sum / batches as f64 };
        Ok(LocalResult { update, loss })
    }

    /// Passes a message through the byte format and checks bit conservation.
    fn transmit(msg: &MaskedUpdate) -> Result<MaskedUpdate> {
        let bytes = wire::serialize(msg);
        let counted = protocol::message_bits(msg);
        let overhead = wire::overhead_bits(msg);
        if bytes.len() as u64 * 8 != counted + overhead {
            return Err(Error::protocol(format!(
                "client {} round {}: {} serialized bits but ledger counts {} plus {} overhead",
                msg.client_id,
                msg.round,
                bytes.len() * 8,
                counted,
                overhead
            )));
        }
        let back = wire::deserialize(&bytes)?;
        if &back != msg {
            return Err(Error::protocol(format!("client {} round {}: lossy round trip", msg.client_id, msg.round)));
        }
        Ok(back)
    }

    pub fn run_round(&mut self) -> Result<()> {
        let round = self.rounds_done;
        let mut clients = std::mem::take(&mut self.clients);
        let results: Vec<Result<LocalResult>> = if self.config.parallel {
            clients.par_iter_mut().map(|c| self.local_search(c, round)).collect()
        } else {
            clients.iter_mut().map(|c| self.local_search(c, round)).collect()
        };
        self.clients = clients;
        let results: Vec<LocalResult> = results.into_iter().collect::<Result<_>>()?;

        self.last_messages.clear();
        let mut uploads = Vec::with_capacity(results.len());
        for r in &results {
            let received = Self::transmit(&r.update)?;
            self.ledger.record(&received, Direction::Upload);
            self.last_messages.push((Direction::Upload, received.clone()));
            uploads.push(received);
        }
        let pulls = match self.method {
            Method::Faqs => protocol::masked_pulls(&uploads)?,
            Method::FedAvg { block } => protocol::fedavg_baseline_round(&uploads, block)?,
        };
        let mode = self.eval_mode();
        for ((client, pull), (r, up)) in self.clients.iter_mut().zip(&pulls).zip(results.iter().zip(&uploads)) {
            let received = Self::transmit(pull)?;
            self.ledger.record(&received, Direction::Pull);
            self.last_messages.push((Direction::Pull, received.clone()));
            match self.method {
                Method::Faqs => received.install_delta(&mut client.net)?,
                Method::FedAvg { .. } => received.install(&mut client.net)?,
            }
            let acc = accuracy(&client.net, &self.data, &client.holdout, &mode)?;
            let (lat, ms) = match self.method {
                Method::Faqs => proxy_values(&client.net, &self.table)?,
                Method::FedAvg { block } => {
                    architecture_cost(&self.table, &vec![block; client.net.layers.len()], None)?
                }
            };
            self.metrics.push(MetricRow {
                round,
                client: client.id,
                train_loss: r.loss,
                accuracy: acc,
                expected_lat: lat,
                expected_ms: ms,
                bits_uploaded: protocol::message_bits(up),
                bits_pulled: protocol::message_bits(&received),
            });
        }
        self.rounds_done += 1;
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        while self.rounds_done < self.config.rounds {
            self.run_round()?;
        }
        Ok(())
    }

    /// Freezes each client's architecture and bit widths, zeroes unselected regions and
    /// trains the rest with straight-through quantization at the frozen widths.
    pub fn finetune_client(&self, client: &ClientState, epochs: usize) -> Result<FinalModel> {
        let mut net = client.net.clone();
        let search_accuracy = accuracy(&net, &self.data, &client.holdout, &self.eval_mode())?;
        let (blocks, quant) = match self.method {
            Method::Faqs => (net.select_blocks(), Some(net.select_quant())),
            Method::FedAvg { block } => (vec![block; net.layers.len()], None),
        };
        for (l, &b) in net.layers.iter_mut().zip(&blocks) {
            l.apply_mask(b);
        }
        let mode = NetMode::Fixed { blocks: blocks.clone(), quant: quant.clone() };
        let mut rng = ChaCha8Rng::seed_from_u64(client_seed(self.config.seed, client.id, FINETUNE_ROUND, 3));
        let mut order = client.train.clone();
        for _ in 0..epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(self.config.batch_size) {
                let (x, labels) = self.data.batch(chunk);
                let mut g = Graph::new();
                let v = net.register(&mut g);
                let xv = g.constant(x);
                let f = net.forward(&mut g, &v, xv, &mode)?;
                let loss = g.softmax_cross_entropy(f.logits, &labels)?;
                let value = g.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::Diverged {
                        round: FINETUNE_ROUND,
                        client: client.id,
                        detail: format!("finetune loss is {value}"),
                    });
                }
                let grads = g.backward(loss)?;
                net.apply_gradients(&v, &grads, self.config.lr_w, 0.0);
            }
        }
        let acc = accuracy(&net, &self.data, &client.holdout, &mode)?;
        let (latency_ms, model_bytes) = architecture_cost(&self.table, &blocks, quant.as_deref())?;
        Ok(FinalModel {
            client: client.id,
            coeff: client.coeff,
            blocks,
            quant,
            net,
            accuracy: acc,
            search_accuracy,
            latency_ms,
            model_bytes,
        })
    }

    pub fn finetune(&self) -> Result<Vec<FinalModel>> {
        let epochs = match self.method {
            Method::Faqs => self.config.finetune_epochs,
            Method::FedAvg { .. } => 0,
        };
        let go = |c: &ClientState| self.finetune_client(c, epochs);
        if self.config.parallel {
            self.clients.par_iter().map(go).collect()
        } else {
            self.clients.iter().map(go).collect()
        }
    }

    /// Counted bits per round, both directions.
    pub fn round_bits(&self) -> Vec<u64> {
        (0..self.rounds_done).map(|r| protocol::comm_cost(&self.ledger, Some(r))).collect()
    }

    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("round,client,train_loss,accuracy,expected_lat,expected_ms,bits_uploaded,bits_pulled\n");
        for m in &self.metrics {
            let _ = writeln!(
                s,
                "{},{},{:.6},{:.6},{:.6},{:.3},{},{}",
                m.round, m.client, m.train_loss, m.accuracy, m.expected_lat, m.expected_ms, m.bits_uploaded, m.bits_pulled
            );
        }
        s
    }
}

pub fn describe_blocks(blocks: &[BlockChoice]) -> String {
    blocks.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(" ")
}

pub fn final_models_csv(models: &[FinalModel]) -> String {
    let mut s = String::from("client,alpha,beta,gamma,blocks,bits,accuracy,search_accuracy,latency_ms,model_bytes\n");
    for m in models {
        let bits = match &m.quant {
            Some(q) => q.iter().map(|q| q.bits().to_string()).collect::<Vec<_>>().join(" "),
            None => "32".into(),
        };
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.1}",
            m.client,
            m.coeff.alpha,
            m.coeff.beta,
            m.coeff.gamma,
            describe_blocks(&m.blocks),
            bits,
            m.accuracy,
            m.search_accuracy,
            m.latency_ms,
            m.model_bytes
        );
    }
    s
}
