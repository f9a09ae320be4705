use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::Network;
use crate::quant::{QuantChoice, QuantState};
use crate::superkernel::{BlockChoice, BlockMasks, LayerConfig, SuperKernelLayer, KERNEL};

/// Numeric precision of a transmitted weight tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Precision {
    Quant(QuantChoice),
    Float32,
}

impl Precision {
    pub fn bits(self) -> u8 {
        match self {
            Precision::Quant(q) => q.bits(),
            Precision::Float32 => 32,
        }
    }

    pub fn from_bits(bits: u8) -> Option<Self> {
        match bits {
            32 => Some(Precision::Float32),
            b => QuantChoice::from_bits(b as u32).ok().map(Precision::Quant),
        }
    }
}

/// Weight values of one tensor on the wire.
#[derive(Clone, Debug, PartialEq)]
pub enum TensorPayload {
    /// `bits`-wide codes: the top bits of the 16-bit code against `(w_min, w_max)`.
    Coded {
        bits: u8,
        w_min: f32,
        w_max: f32,
        codes: Vec<u16>,
    },
    Raw(Vec<f32>),
}

fn f32_bounds(values: &[f64]) -> (f64, f64) {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (lo as f32 as f64, hi as f32 as f64)
}

impl TensorPayload {
    pub fn encode(values: &[f64], precision: Precision) -> Self {
        match precision {
            Precision::Float32 => TensorPayload::Raw(values.iter().map(|&v| v as f32).collect()),
            Precision::Quant(q) => {
                if values.is_empty() {
                    return TensorPayload::Coded { bits: q.bits(), w_min: 0.0, w_max: 0.0, codes: Vec::new() };
                }
                let (lo, hi) = f32_bounds(values);
                let state = QuantState::encode_with_bounds(&Tensor::from_vec(values.to_vec()), lo, hi);
                let shift = 16 - q.bits() as u32;
                let codes = state.codes.iter().map(|&c| (c & q.code_mask()) >> shift).collect();
                TensorPayload::Coded { bits: q.bits(), w_min: lo as f32, w_max: hi as f32, codes }
            }
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorPayload::Coded { codes, .. } => codes.len(),
            TensorPayload::Raw(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn decode(&self) -> Vec<f64> {
        match self {
            TensorPayload::Raw(v) => v.iter().map(|&x| x as f64).collect(),
            TensorPayload::Coded { bits, w_min, w_max, codes } => {
                let state = QuantState {
                    codes: Vec::new(),
                    w_min: *w_min as f64,
                    w_max: *w_max as f64,
                    shape: vec![0],
                };
                let shift = 16 - *bits as u32;
                codes.iter().map(|&c| state.decode_code(c << shift)).collect()
            }
        }
    }

    /// Bits of weight payload plus the two 32-bit bounds when coded and non-empty.
    pub fn ledger_parts(&self) -> (u64, u32, u64) {
        match self {
            TensorPayload::Coded { bits, codes, .. } => {
                let bounds = if codes.is_empty() { 0 } else { 2 };
                (codes.len() as u64, *bits as u32, bounds)
            }
            TensorPayload::Raw(v) => (v.len() as u64, 32, 0),
        }
    }
}

/// Indices (row-major, ascending) that a block keeps in each tensor of a layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectedIndices {
    pub expand: Vec<usize>,
    pub depthwise: Vec<usize>,
    pub project: Vec<usize>,
    /// Into the concatenated affine vector
    /// `[expand scale | expand shift | dw scale | dw shift | project scale | project shift]`.
    pub affine: Vec<usize>,
}

fn true_indices(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
}

impl SelectedIndices {
    pub fn new(cfg: &LayerConfig, block: BlockChoice) -> Self {
        let masks = BlockMasks::new(cfg, block);
        let cm = cfg.c_max();
        let mut affine = Vec::new();
        if !block.is_skip() {
            for part in 0..4 {
                affine.extend(true_indices(&masks.channels).into_iter().map(|c| part * cm + c));
            }
            affine.extend(4 * cm..4 * cm + 2 * cfg.c_out);
        }
        SelectedIndices {
            expand: true_indices(&masks.expand),
            depthwise: true_indices(&masks.depthwise),
            project: true_indices(&masks.project),
            affine,
        }
    }
}

/// Full-length affine vector of a layer in wire order.
pub fn affine_vector(layer: &SuperKernelLayer) -> Vec<f64> {
    [
        &layer.expand_affine.scale,
        &layer.expand_affine.shift,
        &layer.dw_affine.scale,
        &layer.dw_affine.shift,
        &layer.project_affine.scale,
        &layer.project_affine.shift,
    ]
    .iter()
    .flat_map(|t| t.data().iter().copied())
    .collect()
}

/// Total parameter count of a layer if every region were sent: weights, affine,
/// five thresholds and six bounds.
pub fn full_layer_params(c_in: usize, c_out: usize) -> u64 {
    let cm = 6 * c_in;
    (cm * c_in + cm * KERNEL * KERNEL + c_out * cm + 4 * cm + 2 * c_out + 5 + 6) as u64
}

/// One searchable layer's share of a message.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerUpdate {
    pub c_in: u16,
    pub c_out: u16,
    pub block: BlockChoice,
    pub precision: Precision,
    pub expand: TensorPayload,
    pub depthwise: TensorPayload,
    pub project: TensorPayload,
    pub affine: Vec<f32>,
    /// `(t_k5, t_e3, t_e6, t_q58, t_q916)`; absent for the fixed-architecture baseline.
    pub thresholds: Option<[f32; 5]>,
}

/// Real values of a layer's selected entries, in the order of [`SelectedIndices`].
#[derive(Clone, Debug, PartialEq)]
pub struct LayerValues {
    pub c_in: usize,
    pub c_out: usize,
    pub block: BlockChoice,
    pub expand: Vec<f64>,
    pub depthwise: Vec<f64>,
    pub project: Vec<f64>,
    pub affine: Vec<f64>,
    pub thresholds: Option<[f32; 5]>,
}

impl LayerValues {
    pub fn config(&self) -> LayerConfig {
        LayerConfig { index: 0, c_in: self.c_in, c_out: self.c_out, stride: 1 }
    }

    /// Gathers the selected entries of `layer` for `block`.
    pub fn gather(layer: &SuperKernelLayer, block: BlockChoice, with_thresholds: bool) -> Self {
        let cfg = &layer.config;
        let idx = SelectedIndices::new(cfg, block);
        let pick = |t: &[f64], ix: &[usize]| ix.iter().map(|&i| t[i]).collect::<Vec<_>>();
        let thresholds = with_thresholds.then(|| {
            [
                layer.arch.t_k5 as f32,
                layer.arch.t_e3 as f32,
                layer.arch.t_e6 as f32,
                layer.quant.t_q58 as f32,
                layer.quant.t_q916 as f32,
            ]
        });
        LayerValues {
            c_in: cfg.c_in,
            c_out: cfg.c_out,
            block,
            expand: pick(layer.expand_weight.data(), &idx.expand),
            depthwise: pick(layer.dw_weight.data(), &idx.depthwise),
            project: pick(layer.project_weight.data(), &idx.project),
            affine: pick(&affine_vector(layer), &idx.affine),
            thresholds,
        }
    }

    pub fn encode(&self, precision: Precision) -> LayerUpdate {
        LayerUpdate {
            c_in: self.c_in as u16,
            c_out: self.c_out as u16,
            block: self.block,
            precision,
            expand: TensorPayload::encode(&self.expand, precision),
            depthwise: TensorPayload::encode(&self.depthwise, precision),
            project: TensorPayload::encode(&self.project, precision),
            affine: self.affine.iter().map(|&v| v as f32).collect(),
            thresholds: self.thresholds,
        }
    }

    /// Writes the selected entries back into `layer`; unselected entries keep their values.
    pub fn install(&self, layer: &mut SuperKernelLayer) -> Result<()> {
        let cfg = layer.config;
        if cfg.c_in != self.c_in || cfg.c_out != self.c_out {
            return Err(Error::protocol(format!(
                "layer {} is {}->{} but the update carries {}->{}",
                cfg.index, cfg.c_in, cfg.c_out, self.c_in, self.c_out
            )));
        }
        let idx = SelectedIndices::new(&cfg, self.block);
        let put = |t: &mut Tensor, ix: &[usize], vals: &[f64]| {
            for (&i, &v) in ix.iter().zip(vals) {
                t.data_mut()[i] = v;
            }
        };
        put(&mut layer.expand_weight, &idx.expand, &self.expand);
        put(&mut layer.dw_weight, &idx.depthwise, &self.depthwise);
        put(&mut layer.project_weight, &idx.project, &self.project);
        let cm = cfg.c_max();
        let co = cfg.c_out;
        for (&i, &v) in idx.affine.iter().zip(&self.affine) {
            let (t, j) = match i {
                i if i < cm => (&mut layer.expand_affine.scale, i),
                i if i < 2 * cm => (&mut layer.expand_affine.shift, i - cm),
                i if i < 3 * cm => (&mut layer.dw_affine.scale, i - 2 * cm),
                i if i < 4 * cm => (&mut layer.dw_affine.shift, i - 3 * cm),
                i if i < 4 * cm + co => (&mut layer.project_affine.scale, i - 4 * cm),
                i => (&mut layer.project_affine.shift, i - 4 * cm - co),
            };
            t.data_mut()[j] = v;
        }
        Ok(())
    }
}

impl LayerUpdate {
    pub fn config(&self) -> LayerConfig {
        LayerConfig { index: 0, c_in: self.c_in as usize, c_out: self.c_out as usize, stride: 1 }
    }

    pub fn decode(&self) -> LayerValues {
        LayerValues {
            c_in: self.c_in as usize,
            c_out: self.c_out as usize,
            block: self.block,
            expand: self.expand.decode(),
            depthwise: self.depthwise.decode(),
            project: self.project.decode(),
            affine: self.affine.iter().map(|&v| v as f64).collect(),
            thresholds: self.thresholds,
        }
    }

    /// Checks that payload sizes match the block's regions exactly.
    pub fn validate(&self) -> Result<()> {
        let idx = SelectedIndices::new(&self.config(), self.block);
        let checks = [
            ("expand", self.expand.len(), idx.expand.len()),
            ("depthwise", self.depthwise.len(), idx.depthwise.len()),
            ("project", self.project.len(), idx.project.len()),
            ("affine", self.affine.len(), idx.affine.len()),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::protocol(format!(
                    "{name} payload has {got} values but block {} selects {want}",
                    self.block
                )));
            }
        }
        for p in [&self.expand, &self.depthwise, &self.project] {
            match (p, self.precision) {
                (TensorPayload::Raw(_), Precision::Float32) => {}
                (TensorPayload::Coded { bits, codes, .. }, Precision::Quant(q)) if *bits == q.bits() => {
                    if codes.iter().any(|&c| (c as u32) >> bits != 0) {
                        return Err(Error::protocol(format!("code wider than {bits} bits")));
                    }
                }
                _ => return Err(Error::protocol("payload precision disagrees with layer precision")),
            }
        }
        Ok(())
    }
}

/// Stem and classifier parameters, always sent in full.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseUpdate {
    pub precision: Precision,
    /// `(C_0, C_img)`
    pub stem_dims: (u16, u16),
    /// `(num_classes, C_last)`
    pub head_dims: (u16, u16),
    pub stem_weight: TensorPayload,
    pub stem_bias: Vec<f32>,
    pub head_weight: TensorPayload,
    pub head_bias: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseValues {
    pub stem_dims: (usize, usize),
    pub head_dims: (usize, usize),
    pub stem_weight: Vec<f64>,
    pub stem_bias: Vec<f64>,
    pub head_weight: Vec<f64>,
    pub head_bias: Vec<f64>,
}

impl DenseValues {
    pub fn gather(net: &Network) -> Self {
        DenseValues {
            stem_dims: (net.stem_weight.shape()[0], net.stem_weight.shape()[1]),
            head_dims: (net.head_weight.shape()[0], net.head_weight.shape()[1]),
            stem_weight: net.stem_weight.data().to_vec(),
            stem_bias: net.stem_bias.data().to_vec(),
            head_weight: net.head_weight.data().to_vec(),
            head_bias: net.head_bias.data().to_vec(),
        }
    }

    pub fn encode(&self, precision: Precision) -> DenseUpdate {
        let f = |v: &[f64]| v.iter().map(|&x| x as f32).collect();
        DenseUpdate {
            precision,
            stem_dims: (self.stem_dims.0 as u16, self.stem_dims.1 as u16),
            head_dims: (self.head_dims.0 as u16, self.head_dims.1 as u16),
            stem_weight: TensorPayload::encode(&self.stem_weight, precision),
            stem_bias: f(&self.stem_bias),
            head_weight: TensorPayload::encode(&self.head_weight, precision),
            head_bias: f(&self.head_bias),
        }
    }

    pub fn install(&self, net: &mut Network) -> Result<()> {
        if net.stem_weight.len() != self.stem_weight.len() || net.head_weight.len() != self.head_weight.len() {
            return Err(Error::protocol("dense section does not match the network"));
        }
        net.stem_weight.data_mut().copy_from_slice(&self.stem_weight);
        net.stem_bias.data_mut().copy_from_slice(&self.stem_bias);
        net.head_weight.data_mut().copy_from_slice(&self.head_weight);
        net.head_bias.data_mut().copy_from_slice(&self.head_bias);
        Ok(())
    }
}

impl DenseUpdate {
    pub fn decode(&self) -> DenseValues {
        let f = |v: &[f32]| v.iter().map(|&x| x as f64).collect();
        DenseValues {
            stem_dims: (self.stem_dims.0 as usize, self.stem_dims.1 as usize),
            head_dims: (self.head_dims.0 as usize, self.head_dims.1 as usize),
            stem_weight: self.stem_weight.decode(),
            stem_bias: f(&self.stem_bias),
            head_weight: self.head_weight.decode(),
            head_bias: f(&self.head_bias),
        }
    }

    /// Parameter count if everything including bounds were sent.
    pub fn full_params(&self) -> u64 {
        let (c0, ci) = self.stem_dims;
        let (k, cl) = self.head_dims;
        (c0 as u64 * ci as u64) + c0 as u64 + (k as u64 * cl as u64) + k as u64 + 4
    }
}

/// The wire message: masked layer payloads, the dense section and thresholds.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedUpdate {
    pub client_id: u16,
    pub round: u32,
    pub layers: Vec<LayerUpdate>,
    pub dense: DenseUpdate,
}

/// Decoded counterpart of a [`MaskedUpdate`].
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedUpdate {
    pub client_id: u16,
    pub round: u32,
    pub layers: Vec<(LayerValues, Precision)>,
    pub dense: (DenseValues, Precision),
}

impl MaskedUpdate {
    pub fn decode(&self) -> DecodedUpdate {
        DecodedUpdate {
            client_id: self.client_id,
            round: self.round,
            layers: self.layers.iter().map(|l| (l.decode(), l.precision)).collect(),
            dense: (self.dense.decode(), self.dense.precision),
        }
    }

    /// Writes every transmitted value into `net`; regions absent from the message
    /// keep their local values, thresholds stay local.
    pub fn install(&self, net: &mut Network) -> Result<()> {
        if self.layers.len() != net.layers.len() {
            return Err(Error::protocol(format!(
                "message has {} layers, network has {}",
                self.layers.len(),
                net.layers.len()
            )));
        }
        for (lu, layer) in self.layers.iter().zip(net.layers.iter_mut()) {
            lu.decode().install(layer)?;
        }
        self.dense.decode().install(net)
    }

    /// Adds every transmitted value to the matching entry of `net`; used when the
    /// message carries changes rather than values. Thresholds stay local.
    pub fn install_delta(&self, net: &mut Network) -> Result<()> {
        if self.layers.len() != net.layers.len() {
            return Err(Error::protocol(format!(
                "message has {} layers, network has {}",
                self.layers.len(),
                net.layers.len()
            )));
        }
        for (lu, layer) in self.layers.iter().zip(net.layers.iter_mut()) {
            let d = lu.decode();
            let mut local = LayerValues::gather(layer, lu.block, false);
            add_into(&mut local.expand, &d.expand)?;
            add_into(&mut local.depthwise, &d.depthwise)?;
            add_into(&mut local.project, &d.project)?;
            add_into(&mut local.affine, &d.affine)?;
            local.install(layer)?;
        }
        let d = self.dense.decode();
        let mut local = DenseValues::gather(net);
        add_into(&mut local.stem_weight, &d.stem_weight)?;
        add_into(&mut local.stem_bias, &d.stem_bias)?;
        add_into(&mut local.head_weight, &d.head_weight)?;
        add_into(&mut local.head_bias, &d.head_bias)?;
        local.install(net)
    }
}

fn add_into(acc: &mut [f64], d: &[f64]) -> Result<()> {
    if acc.len() != d.len() {
        return Err(Error::protocol(format!("payload has {} values, expected {}", d.len(), acc.len())));
    }
    for (a, b) in acc.iter_mut().zip(d) {
        *a += b;
    }
    Ok(())
}

fn sub_values(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::protocol(format!("payload sizes differ: {} and {}", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x - y).collect())
}

impl DecodedUpdate {
    /// Entry-wise `self - base` at `self`'s precisions. Blocks must agree layer by layer;
    /// thresholds are taken from `self`.
    pub fn minus(&self, base: &DecodedUpdate) -> Result<DecodedUpdate> {
        if self.layers.len() != base.layers.len() {
            return Err(Error::protocol("updates differ in layer count"));
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        for ((a, p), (b, _)) in self.layers.iter().zip(&base.layers) {
            if a.block != b.block || a.c_in != b.c_in || a.c_out != b.c_out {
                return Err(Error::protocol(format!("block {} cannot be differenced against {}", a.block, b.block)));
            }
            layers.push((
                LayerValues {
                    c_in: a.c_in,
                    c_out: a.c_out,
                    block: a.block,
                    expand: sub_values(&a.expand, &b.expand)?,
                    depthwise: sub_values(&a.depthwise, &b.depthwise)?,
                    project: sub_values(&a.project, &b.project)?,
                    affine: sub_values(&a.affine, &b.affine)?,
                    thresholds: a.thresholds,
                },
                *p,
            ));
        }
        let (a, p) = &self.dense;
        let b = &base.dense.0;
        let dense = DenseValues {
            stem_dims: a.stem_dims,
            head_dims: a.head_dims,
            stem_weight: sub_values(&a.stem_weight, &b.stem_weight)?,
            stem_bias: sub_values(&a.stem_bias, &b.stem_bias)?,
            head_weight: sub_values(&a.head_weight, &b.head_weight)?,
            head_bias: sub_values(&a.head_bias, &b.head_bias)?,
        };
        Ok(DecodedUpdate { client_id: self.client_id, round: self.round, layers, dense: (dense, *p) })
    }

    pub fn encode(&self) -> MaskedUpdate {
        MaskedUpdate {
            client_id: self.client_id,
            round: self.round,
            layers: self.layers.iter().map(|(v, p)| v.encode(*p)).collect(),
            dense: self.dense.0.encode(self.dense.1),
        }
    }
}

/// Masked sample of one layer: block and bit width from the current indicators,
/// payload restricted to the selected regions, thresholds always attached.
pub fn masked_sample(layer: &SuperKernelLayer) -> LayerUpdate {
    let block = layer.select_block();
    let q = layer.select_quant();
    LayerValues::gather(layer, block, true).encode(Precision::Quant(q))
}

/// Masked upload of a whole network after local search. The dense section
/// travels at the bit width selected for the last searchable layer.
pub fn masked_upload(net: &Network, client_id: u16, round: u32) -> MaskedUpdate {
    let layers: Vec<LayerUpdate> = net.layers.iter().map(masked_sample).collect();
    let dense_precision = layers
        .last()
        .map(|l| l.precision)
        .unwrap_or(Precision::Quant(QuantChoice::Bits16));
    MaskedUpdate {
        client_id,
        round,
        layers,
        dense: DenseValues::gather(net).encode(dense_precision),
    }
}

/// Full-precision upload of a fixed-architecture network (the FedAvg baseline).
pub fn baseline_upload(net: &Network, block: BlockChoice, client_id: u16, round: u32) -> MaskedUpdate {
    MaskedUpdate {
        client_id,
        round,
        layers: net
            .layers
            .iter()
            .map(|l| LayerValues::gather(l, block, false).encode(Precision::Float32))
            .collect(),
        dense: DenseValues::gather(net).encode(Precision::Float32),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn narrow_block_on_wide_layer() {
        let cfg = LayerConfig::new(0, 24, 24, 1).unwrap();
        let idx = SelectedIndices::new(&cfg, BlockChoice::K3E3);
        assert_eq!(idx.depthwise.len(), 72 * 9);
        assert!((idx.depthwise.len() as f64 / (144.0 * 25.0) - 0.18).abs() < 1e-12);
        let full = SelectedIndices::new(&cfg, BlockChoice::K5E6);
        assert_eq!(full.depthwise.len(), 3600);
        assert!(SelectedIndices::new(&cfg, BlockChoice::Skip).affine.is_empty());
    }

    #[test]
    fn payload_codes_fit_width() {
        let cfg = LayerConfig::new(0, 4, 4, 1).unwrap();
        let layer = SuperKernelLayer::init(cfg, &mut ChaCha8Rng::seed_from_u64(5));
        for q in [QuantChoice::Bits4, QuantChoice::Bits8, QuantChoice::Bits16] {
            let u = LayerValues::gather(&layer, BlockChoice::K5E6, true).encode(Precision::Quant(q));
            u.validate().unwrap();
        }
    }

    #[test]
    fn install_touches_only_selected_entries() {
        let cfg = LayerConfig::new(0, 4, 4, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let src = SuperKernelLayer::init(cfg, &mut rng);
        let mut dst = SuperKernelLayer::init(cfg, &mut rng);
        let before = dst.clone();
        LayerValues::gather(&src, BlockChoice::K3E3, true).install(&mut dst).unwrap();
        let masks = BlockMasks::new(&cfg, BlockChoice::K3E3);
        for (i, &m) in masks.depthwise.iter().enumerate() {
            let want = if m { src.dw_weight.data()[i] } else { before.dw_weight.data()[i] };
            assert_eq!(dst.dw_weight.data()[i], want);
        }
        assert_eq!(dst.project_affine, src.project_affine);
        assert_eq!(dst.arch, before.arch);
    }

    #[test]
    fn coded_payload_error_is_bounded() {
        let vals: Vec<f64> = (0..50).map(|i| (i as f64 * 0.731).sin()).collect();
        let mut last = f64::INFINITY;
        for q in [QuantChoice::Bits4, QuantChoice::Bits8, QuantChoice::Bits16] {
            let back = TensorPayload::encode(&vals, Precision::Quant(q)).decode();
            let err = vals.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err <= 2.0 / (1u32 << q.bits()) as f64 + 1e-6);
            assert!(err <= last);
            last = err;
        }
    }
}
