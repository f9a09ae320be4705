use std::fmt::Write as _;

use super::message::{full_layer_params, MaskedUpdate, TensorPayload};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    Upload,
    Pull,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Upload => "upload",
            Direction::Pull => "pull",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LedgerEntry {
    pub round: u32,
    pub client: u16,
    /// Searchable layers are `0..L`; the dense section is recorded as layer `L`.
    pub layer: u32,
    pub direction: Direction,
    pub n_params: u64,
    pub bits_per_param: u32,
    pub gamma: f64,
    pub bits_total: u64,
}

/// Append-only record of every counted bit on the wire.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CommLedger {
    pub entries: Vec<LedgerEntry>,
}

/// `(n_params, bits_per_param)` groups of one section: coded weights at their width,
/// and all 32-bit scalars (bounds, raw weights, affine, biases, thresholds) together.
fn section_groups(payloads: &[&TensorPayload], f32_extra: u64) -> Vec<(u64, u32)> {
    let mut coded: Option<(u64, u32)> = None;
    let mut scalars = f32_extra;
    for p in payloads {
        let (n, bits, bounds) = p.ledger_parts();
        scalars += bounds;
        if bits == 32 {
            scalars += n;
        } else {
            let c = coded.get_or_insert((0, bits));
            c.0 += n;
        }
    }
    let mut out = Vec::new();
    if let Some(c) = coded.filter(|c| c.0 > 0) {
        out.push(c);
    }
    if scalars > 0 {
        out.push((scalars, 32));
    }
    out
}

/// Ledger groups of a message, per section: `(layer, full_params, groups)`.
pub fn message_groups(msg: &MaskedUpdate) -> Vec<(u32, u64, Vec<(u64, u32)>)> {
    let mut out = Vec::with_capacity(msg.layers.len() + 1);
    for (i, l) in msg.layers.iter().enumerate() {
        let extra = l.affine.len() as u64 + if l.thresholds.is_some() { 5 } else { 0 };
        out.push((
            i as u32,
            full_layer_params(l.c_in as usize, l.c_out as usize),
            section_groups(&[&l.expand, &l.depthwise, &l.project], extra),
        ));
    }
    let d = &msg.dense;
    let extra = (d.stem_bias.len() + d.head_bias.len()) as u64;
    out.push((
        msg.layers.len() as u32,
        d.full_params(),
        section_groups(&[&d.stem_weight, &d.head_weight], extra),
    ));
    out
}

/// Counted bits of a message.
pub fn message_bits(msg: &MaskedUpdate) -> u64 {
    message_groups(msg)
        .iter()
        .flat_map(|(_, _, g)| g.iter().map(|&(n, b)| n * b as u64))
        .sum()
}

impl CommLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, msg: &MaskedUpdate, direction: Direction) {
        for (layer, full, groups) in message_groups(msg) {
            for (n, bits) in groups {
                self.entries.push(LedgerEntry {
                    round: msg.round,
                    client: msg.client_id,
                    layer,
                    direction,
                    n_params: n,
                    bits_per_param: bits,
                    gamma: n as f64 / full as f64,
                    bits_total: n * bits as u64,
                });
            }
        }
    }

    pub fn extend(&mut self, other: CommLedger) {
        self.entries.extend(other.entries);
    }

    pub fn bits(&self, round: Option<u32>, client: Option<u16>, direction: Option<Direction>) -> u64 {
        self.entries
            .iter()
            .filter(|e| round.is_none_or(|r| e.round == r))
            .filter(|e| client.is_none_or(|c| e.client == c))
            .filter(|e| direction.is_none_or(|d| e.direction == d))
            .map(|e| e.bits_total)
            .sum()
    }

    pub fn rounds(&self) -> Vec<u32> {
        let mut r: Vec<u32> = self.entries.iter().map(|e| e.round).collect();
        r.sort_unstable();
        r.dedup();
        r
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("round,client,layer,direction,n_params,bits_per_param,gamma,bits_total\n");
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{:.6},{}",
                e.round,
                e.client,
                e.layer,
                e.direction.as_str(),
                e.n_params,
                e.bits_per_param,
                e.gamma,
                e.bits_total
            );
        }
        s
    }
}

/// Total bits over one round or all rounds, both directions.
pub fn comm_cost(ledger: &CommLedger, round: Option<u32>) -> u64 {
    ledger.bits(round, None, None)
}

/// 1 KB = 1000 bytes.
pub fn bits_to_kb(bits: u64) -> f64 {
    bits as f64 / 8.0 / 1000.0
}

/// Closed-form cost of one block exchanged both ways: `2 · γ · N · Q` bits.
pub fn block_comm_bits(gamma: f64, n: f64, q: f64) -> f64 {
    2.0 * gamma * n * q
}
