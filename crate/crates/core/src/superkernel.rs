//! Single-path weight-sharing super kernel.
//!
//! One searchable inverted-bottleneck layer keeps a single 5x5, ratio-6
//! depthwise kernel. Its 3x3 centre and the surrounding ring, and the first and
//! second half of the expanded channels, are gated by sigmoids of
//! `||group||^2 - threshold`. Training uses the soft gates; transmission and
//! finetuning use the discrete block given by the signs of the indicators.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::quant::{self, BitShared, QuantChoice, QuantGates, QuantThresholds};

pub const KERNEL: usize = 5;
pub const MAX_RATIO: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LayerConfig {
    pub index: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
}

impl LayerConfig {
    pub fn new(index: usize, c_in: usize, c_out: usize, stride: usize) -> Result<Self> {
        if c_in == 0 || c_out == 0 {
            return Err(Error::config(format!("layer {index}: channel counts must be positive")));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::config(format!("layer {index}: stride must be 1 or 2, got {stride}")));
        }
        Ok(LayerConfig { index, c_in, c_out, stride })
    }

    pub fn c_max(&self) -> usize {
        MAX_RATIO * self.c_in
    }

    /// Channels in the first (ratio-3) half of the expanded width.
    pub fn half(&self) -> usize {
        3 * self.c_in
    }

    /// Only stride-1, width-preserving layers carry a residual and may be skipped.
    pub fn allows_skip(&self) -> bool {
        self.stride == 1 && self.c_in == self.c_out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Spatial {
    Center3x3,
    Ring5x5,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ChannelHalf {
    First,
    Second,
}

/// One of the four disjoint pieces of the depthwise super kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct KernelRegion {
    pub spatial: Spatial,
    pub channels: ChannelHalf,
}

impl KernelRegion {
    pub const ALL: [KernelRegion; 4] = [
        KernelRegion { spatial: Spatial::Center3x3, channels: ChannelHalf::First },
        KernelRegion { spatial: Spatial::Center3x3, channels: ChannelHalf::Second },
        KernelRegion { spatial: Spatial::Ring5x5, channels: ChannelHalf::First },
        KernelRegion { spatial: Spatial::Ring5x5, channels: ChannelHalf::Second },
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockChoice {
    Block { kernel: u8, ratio: u8 },
    Skip,
}

impl BlockChoice {
    pub const K3E3: BlockChoice = BlockChoice::Block { kernel: 3, ratio: 3 };
    pub const K3E6: BlockChoice = BlockChoice::Block { kernel: 3, ratio: 6 };
    pub const K5E3: BlockChoice = BlockChoice::Block { kernel: 5, ratio: 3 };
    pub const K5E6: BlockChoice = BlockChoice::Block { kernel: 5, ratio: 6 };
    pub const ALL: [BlockChoice; 5] = [Self::K5E6, Self::K3E6, Self::K5E3, Self::K3E3, Self::Skip];

    /// Sign table over `(id_e3, id_e6, id_k5)`; an indicator of exactly zero counts as positive.
    pub fn from_indicators(id_e3: f64, id_e6: f64, id_k5: f64) -> Self {
        if id_e3 < 0.0 {
            return BlockChoice::Skip;
        }
        let kernel = if id_k5 >= 0.0 { 5 } else { 3 };
        let ratio = if id_e6 >= 0.0 { 6 } else { 3 };
        BlockChoice::Block { kernel, ratio }
    }

    pub fn kernel(self) -> Option<usize> {
        match self {
            BlockChoice::Block { kernel, .. } => Some(kernel as usize),
            BlockChoice::Skip => None,
        }
    }

    pub fn ratio(self) -> Option<usize> {
        match self {
            BlockChoice::Block { ratio, .. } => Some(ratio as usize),
            BlockChoice::Skip => None,
        }
    }

    pub fn is_skip(self) -> bool {
        matches!(self, BlockChoice::Skip)
    }

    pub fn regions(self) -> Vec<KernelRegion> {
        KernelRegion::ALL.into_iter().filter(|r| self.contains(*r)).collect()
    }

    pub fn contains(self, region: KernelRegion) -> bool {
        match self {
            BlockChoice::Skip => false,
            BlockChoice::Block { kernel, ratio } => {
                (region.spatial == Spatial::Center3x3 || kernel == 5)
                    && (region.channels == ChannelHalf::First || ratio == 6)
            }
        }
    }

    pub fn uses_channel(self, cfg: &LayerConfig, channel: usize) -> bool {
        match self.ratio() {
            None => false,
            Some(6) => true,
            Some(_) => channel < cfg.half(),
        }
    }

    /// Wire tag.
    pub fn tag(self) -> u8 {
        match self {
            BlockChoice::K3E3 => 0,
            BlockChoice::K3E6 => 1,
            BlockChoice::K5E3 => 2,
            BlockChoice::K5E6 => 3,
            BlockChoice::Skip => 4,
            BlockChoice::Block { .. } => unreachable!("only kernels 3/5 and ratios 3/6 exist"),
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(BlockChoice::K3E3),
            1 => Some(BlockChoice::K3E6),
            2 => Some(BlockChoice::K5E3),
            3 => Some(BlockChoice::K5E6),
            4 => Some(BlockChoice::Skip),
            _ => None,
        }
    }
}

impl std::fmt::Display for BlockChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BlockChoice::Block { kernel, ratio } => write!(f, "({kernel},{ratio})"),
            BlockChoice::Skip => write!(f, "skip"),
        }
    }
}

pub fn is_ring(a: usize, b: usize) -> bool {
    a == 0 || b == 0 || a == KERNEL - 1 || b == KERNEL - 1
}

fn region_of(cfg: &LayerConfig, idx: usize) -> KernelRegion {
    let c = idx / (KERNEL * KERNEL);
    let pos = idx % (KERNEL * KERNEL);
    KernelRegion {
        spatial: if is_ring(pos / KERNEL, pos % KERNEL) { Spatial::Ring5x5 } else { Spatial::Center3x3 },
        channels: if c < cfg.half() { ChannelHalf::First } else { ChannelHalf::Second },
    }
}

/// Element masks of every tensor that a block choice keeps.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockMasks {
    pub channels: Vec<bool>,
    pub expand: Vec<bool>,
    pub depthwise: Vec<bool>,
    pub project: Vec<bool>,
}

impl BlockMasks {
    pub fn new(cfg: &LayerConfig, block: BlockChoice) -> Self {
        let cm = cfg.c_max();
        let channels: Vec<bool> = (0..cm).map(|c| block.uses_channel(cfg, c)).collect();
        let expand = (0..cm * cfg.c_in).map(|i| channels[i / cfg.c_in]).collect();
        let depthwise = (0..cm * KERNEL * KERNEL)
            .map(|i| block.contains(region_of(cfg, i)))
            .collect();
        let project = (0..cfg.c_out * cm).map(|i| channels[i % cm]).collect();
        BlockMasks { channels, expand, depthwise, project }
    }

    /// Number of depthwise weights inside `region`.
    pub fn region_size(cfg: &LayerConfig, region: KernelRegion) -> usize {
        let spatial = match region.spatial {
            Spatial::Center3x3 => 9,
            Spatial::Ring5x5 => 16,
        };
        spatial * cfg.half()
    }

    pub fn depthwise_region_mask(cfg: &LayerConfig, region: KernelRegion) -> Vec<bool> {
        (0..cfg.c_max() * KERNEL * KERNEL).map(|i| region_of(cfg, i) == region).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArchThresholds {
    pub t_k5: f64,
    pub t_e3: f64,
    pub t_e6: f64,
}

/// Per-gate sigmoid temperatures: `g = sigma((||group||^2 - t) / tau)`.
/// Fixed at initialization to the group norms so gates start in their linear range.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateTemperature {
    pub k5: f64,
    pub e3: f64,
    pub e6: f64,
    pub q58: f64,
    pub q916: f64,
}

impl Default for GateTemperature {
    fn default() -> Self {
        GateTemperature { k5: 1.0, e3: 1.0, e6: 1.0, q58: 1.0, q916: 1.0 }
    }
}

fn temperature_from(norm: f64) -> f64 {
    if norm.is_finite() && norm > 1e-12 {
        norm
    } else {
        1.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub scale: Tensor,
    pub shift: Tensor,
}

impl Affine {
    pub fn identity(c: usize) -> Self {
        Affine {
            scale: Tensor::full(&[c], 1.0),
            shift: Tensor::zeros(&[c]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuperKernelLayer {
    pub config: LayerConfig,
    /// `[C_max, C_in, 1, 1]`
    pub expand_weight: Tensor,
    pub expand_affine: Affine,
    /// `[C_max, 5, 5]`
    pub dw_weight: Tensor,
    pub dw_affine: Affine,
    /// `[C_out, C_max, 1, 1]`
    pub project_weight: Tensor,
    pub project_affine: Affine,
    pub arch: ArchThresholds,
    pub quant: QuantThresholds,
    pub temperature: GateTemperature,
}

/// Indicator values `||group||^2 - t` for the three architecture decisions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArchIndicators {
    pub id_e3: f64,
    pub id_e6: f64,
    pub id_k5: f64,
}

/// How architecture gates are produced in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ArchMode {
    /// Sigmoid gates learned through the thresholds.
    Soft,
    /// Gates fixed to the given values.
    Forced { g_k5: f64, g_e3: f64, g_e6: f64 },
    /// Discrete block: gates are 0/1 and a skipped layer is the identity.
    Fixed(BlockChoice),
}

/// How weights are quantized before composition.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum QuantMode {
    Off,
    /// Bit-sharing with learned gates.
    BitSharing,
    /// Bit-sharing with fixed gate values.
    Forced(f64, f64),
    /// Top-bit truncation at a fixed width, straight-through.
    Hard(QuantChoice),
}

/// Graph handles of one layer's parameters.
#[derive(Clone, Debug)]
pub struct LayerVars {
    pub expand_weight: Var,
    pub expand_scale: Var,
    pub expand_shift: Var,
    pub dw_weight: Var,
    pub dw_scale: Var,
    pub dw_shift: Var,
    pub project_weight: Var,
    pub project_scale: Var,
    pub project_shift: Var,
    pub t_k5: Var,
    pub t_e3: Var,
    pub t_e6: Var,
    pub t_q58: Var,
    pub t_q916: Var,
}

/// Gate nodes of one layer; constants when the corresponding decision is fixed.
#[derive(Clone, Copy, Debug)]
pub struct LayerGates {
    pub g_k5: Var,
    pub g_e3: Var,
    pub g_e6: Var,
    pub g58: Var,
    pub g916: Var,
}

/// Transformed weights and gates of a layer, before any convolution.
#[derive(Clone, Debug)]
pub struct Composed {
    pub expand: Var,
    pub depthwise: Var,
    pub project: Var,
    pub gates: LayerGates,
    pub indicators: Option<(Var, Var, Var)>,
}

fn normal_tensor(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

fn mask_tensor(shape: &[usize], f: impl Fn(usize) -> bool) -> Tensor {
    Tensor::from_fn(shape, |i| if f(i) { 1.0 } else { 0.0 })
}

impl SuperKernelLayer {
    pub fn init(config: LayerConfig, rng: &mut impl Rng) -> Self {
        let cm = config.c_max();
        let mut layer = SuperKernelLayer {
            config,
            expand_weight: normal_tensor(&[cm, config.c_in, 1, 1], (2.0 / config.c_in as f64).sqrt(), rng),
            expand_affine: Affine::identity(cm),
            dw_weight: normal_tensor(&[cm, KERNEL, KERNEL], (2.0 / 9.0f64).sqrt(), rng),
            dw_affine: Affine::identity(cm),
            project_weight: normal_tensor(&[config.c_out, cm, 1, 1], (1.0 / cm as f64).sqrt(), rng),
            project_affine: Affine::identity(config.c_out),
            arch: ArchThresholds { t_k5: 0.0, t_e3: 0.0, t_e6: 0.0 },
            quant: QuantThresholds { t_q58: 0.0, t_q916: 0.0 },
            temperature: GateTemperature::default(),
        };
        layer.balance_thresholds();
        layer.temperature = GateTemperature {
            k5: temperature_from(layer.arch.t_k5),
            e3: temperature_from(layer.arch.t_e3),
            e6: temperature_from(layer.arch.t_e6),
            q58: temperature_from(layer.quant.t_q58),
            q916: temperature_from(layer.quant.t_q916),
        };
        layer
    }

    /// Sets every threshold to the squared norm of its group so all gates read 0.5.
    pub fn balance_thresholds(&mut self) {
        self.quant = QuantThresholds::balanced(&self.weight_tensors());
        self.arch.t_k5 = 0.0;
        self.arch.t_e3 = 0.0;
        self.arch.t_e6 = 0.0;
        let ring = {
            let mut g = Graph::new();
            let vars = self.register_constants(&mut g);
            let c = self.compose(&mut g, &vars, ArchMode::Soft, QuantMode::BitSharing).expect("well-formed layer");
            let (_, _, id_k5) = c.indicators.expect("soft mode has indicators");
            g.value(id_k5).item()
        };
        self.arch.t_k5 = ring;
        let first = {
            let mut g = Graph::new();
            let vars = self.register_constants(&mut g);
            let c = self.compose(&mut g, &vars, ArchMode::Soft, QuantMode::BitSharing).expect("well-formed layer");
            let (id_e3, _, _) = c.indicators.expect("soft mode has indicators");
            g.value(id_e3).item()
        };
        self.arch.t_e3 = first;
        self.arch.t_e6 = first;
    }

    pub fn weight_tensors(&self) -> [&Tensor; 3] {
        [&self.expand_weight, &self.dw_weight, &self.project_weight]
    }

    fn register_with(&self, g: &mut Graph, leaf: fn(&mut Graph, Tensor) -> Var) -> LayerVars {
        LayerVars {
            expand_weight: leaf(g, self.expand_weight.clone()),
            expand_scale: leaf(g, self.expand_affine.scale.clone()),
            expand_shift: leaf(g, self.expand_affine.shift.clone()),
            dw_weight: leaf(g, self.dw_weight.clone()),
            dw_scale: leaf(g, self.dw_affine.scale.clone()),
            dw_shift: leaf(g, self.dw_affine.shift.clone()),
            project_weight: leaf(g, self.project_weight.clone()),
            project_scale: leaf(g, self.project_affine.scale.clone()),
            project_shift: leaf(g, self.project_affine.shift.clone()),
            t_k5: leaf(g, Tensor::scalar(self.arch.t_k5)),
            t_e3: leaf(g, Tensor::scalar(self.arch.t_e3)),
            t_e6: leaf(g, Tensor::scalar(self.arch.t_e6)),
            t_q58: leaf(g, Tensor::scalar(self.quant.t_q58)),
            t_q916: leaf(g, Tensor::scalar(self.quant.t_q916)),
        }
    }

    /// Adds every parameter as a trainable leaf.
    pub fn register(&self, g: &mut Graph) -> LayerVars {
        self.register_with(g, Graph::param)
    }

    pub fn register_constants(&self, g: &mut Graph) -> LayerVars {
        self.register_with(g, Graph::constant)
    }

    /// Quantization then super-kernel composition, in that order.
    pub fn compose(&self, g: &mut Graph, v: &LayerVars, arch: ArchMode, quant_mode: QuantMode) -> Result<Composed> {
        let cfg = &self.config;
        let cm = cfg.c_max();
        let kk = KERNEL * KERNEL;
        let raw = [v.expand_weight, v.dw_weight, v.project_weight];

        let (weights, g58, g916) = match quant_mode {
            QuantMode::Off => (raw.to_vec(), g.scalar(1.0), g.scalar(1.0)),
            QuantMode::BitSharing | QuantMode::Forced(..) => {
                let gates = match quant_mode {
                    QuantMode::Forced(a, b) => QuantGates::Forced(a, b),
                    _ => QuantGates::Learned {
                        t_q58: v.t_q58,
                        t_q916: v.t_q916,
                        tau: (self.temperature.q58, self.temperature.q916),
                    },
                };
                let BitShared { weights, g58, g916 } = quant::bitshare_graph(g, &raw, gates)?;
                (weights, g58, g916)
            }
            QuantMode::Hard(choice) => {
                let block = match arch {
                    ArchMode::Fixed(b) => b,
                    _ => BlockChoice::K5E6,
                };
                let masks = BlockMasks::new(cfg, block);
                let mut out = Vec::with_capacity(3);
                for (var, mask) in raw.iter().zip([&masks.expand, &masks.depthwise, &masks.project]) {
                    let q = quant::apply_hard_quant_masked(g.value(*var), mask, choice);
                    out.push(g.straight_through(*var, q)?);
                }
                let (a, b) = match choice {
                    QuantChoice::Bits16 => (1.0, 1.0),
                    QuantChoice::Bits8 => (1.0, 0.0),
                    QuantChoice::Bits4 => (0.0, 0.0),
                };
                (out, g.scalar(a), g.scalar(b))
            }
        };
        let (ew, dw, pw) = (weights[0], weights[1], weights[2]);

        let ring_mask = g.constant(mask_tensor(&[cm, KERNEL, KERNEL], |i| {
            let p = i % kk;
            is_ring(p / KERNEL, p % KERNEL)
        }));
        let centre_mask = g.constant(mask_tensor(&[cm, KERNEL, KERNEL], |i| {
            let p = i % kk;
            !is_ring(p / KERNEL, p % KERNEL)
        }));
        let ring = g.mul(dw, ring_mask)?;
        let centre = g.mul(dw, centre_mask)?;

        let mut id_k5 = None;
        let g_k5 = match arch {
            ArchMode::Soft => {
                let n = g.squared_l2(ring);
                let id = g.sub(n, v.t_k5)?;
                id_k5 = Some(id);
                let z = g.scalar_mul(id, 1.0 / self.temperature.k5);
                g.sigmoid(z)
            }
            ArchMode::Forced { g_k5, .. } => g.scalar(g_k5),
            ArchMode::Fixed(b) => g.scalar(if b.kernel() == Some(5) { 1.0 } else { 0.0 }),
        };
        let gated_ring = g.mul(g_k5, ring)?;
        let w_k = g.add(centre, gated_ring)?;

        let first_mask = g.constant(mask_tensor(&[cm, KERNEL, KERNEL], |i| i / kk < cfg.half()));
        let (g_e3, g_e6, ids) = match arch {
            ArchMode::Soft => {
                let first = g.mul(w_k, first_mask)?;
                let n = g.squared_l2(first);
                let id_e3 = g.sub(n, v.t_e3)?;
                let id_e6 = g.sub(n, v.t_e6)?;
                let g_e3 = if cfg.allows_skip() {
                    let z = g.scalar_mul(id_e3, 1.0 / self.temperature.e3);
                    g.sigmoid(z)
                } else {
                    g.scalar(1.0)
                };
                let z = g.scalar_mul(id_e6, 1.0 / self.temperature.e6);
                let g_e6 = g.sigmoid(z);
                (g_e3, g_e6, Some((id_e3, id_e6, id_k5.expect("set in soft mode"))))
            }
            ArchMode::Forced { g_e3, g_e6, .. } => {
                let e3 = if cfg.allows_skip() { g_e3 } else { 1.0 };
                (g.scalar(e3), g.scalar(g_e6), None)
            }
            ArchMode::Fixed(b) => {
                let e3 = if b.is_skip() { 0.0 } else { 1.0 };
                let e6 = if b.ratio() == Some(6) { 1.0 } else { 0.0 };
                (g.scalar(e3), g.scalar(e6), None)
            }
        };

        // channel gate: g_e3 on the first half, g_e3 * g_e6 on the second half
        let first_ch = g.constant(mask_tensor(&[cm], |c| c < cfg.half()));
        let second_ch = g.constant(mask_tensor(&[cm], |c| c >= cfg.half()));
        let second = g.mul(g_e6, second_ch)?;
        let halves = g.add(first_ch, second)?;
        let chan = g.mul(g_e3, halves)?;

        let depthwise = g.scale_axis(w_k, chan, 0)?;
        let expand = g.scale_axis(ew, chan, 0)?;
        let project = g.scale_axis(pw, chan, 1)?;

        Ok(Composed {
            expand,
            depthwise,
            project,
            gates: LayerGates { g_k5, g_e3, g_e6, g58, g916 },
            indicators: ids,
        })
    }

    /// Layer forward on `x` (`[N, C_in, H, W]`). Returns the output and the gate nodes.
    pub fn forward(
        &self,
        g: &mut Graph,
        v: &LayerVars,
        x: Var,
        arch: ArchMode,
        quant_mode: QuantMode,
    ) -> Result<(Var, LayerGates)> {
        let cfg = &self.config;
        let c_in = g.value(x).shape().get(1).copied().unwrap_or(0);
        if c_in != cfg.c_in {
            return Err(Error::Dimension {
                op: "superkernel forward",
                axis: "input channels",
                expected: cfg.c_in,
                actual: c_in,
            });
        }
        if arch == ArchMode::Fixed(BlockChoice::Skip) {
            if !cfg.allows_skip() {
                return Err(Error::config(format!("layer {} cannot be skipped", cfg.index)));
            }
            let zero = g.scalar(0.0);
            let gates = LayerGates { g_k5: zero, g_e3: zero, g_e6: zero, g58: zero, g916: zero };
            return Ok((x, gates));
        }
        let c = self.compose(g, v, arch, quant_mode)?;
        let h = g.conv2d_pointwise(x, c.expand, None)?;
        let h = g.affine_channel(h, v.expand_scale, v.expand_shift)?;
        let h = g.relu6(h);
        let h = g.conv2d_depthwise(h, c.depthwise, cfg.stride)?;
        let h = g.affine_channel(h, v.dw_scale, v.dw_shift)?;
        let h = g.relu6(h);
        let h = g.conv2d_pointwise(h, c.project, None)?;
        let shift = g.mul(c.gates.g_e3, v.project_shift)?;
        let h = g.affine_channel(h, v.project_scale, shift)?;
        let out = if cfg.allows_skip() { g.add(x, h)? } else { h };
        Ok((out, c.gates))
    }

    /// Indicators evaluated along the soft search path.
    pub fn indicators(&self) -> ArchIndicators {
        let mut g = Graph::new();
        let vars = self.register_constants(&mut g);
        let c = self
            .compose(&mut g, &vars, ArchMode::Soft, QuantMode::BitSharing)
            .expect("well-formed layer");
        let (e3, e6, k5) = c.indicators.expect("soft mode has indicators");
        ArchIndicators {
            id_e3: g.value(e3).item(),
            id_e6: g.value(e6).item(),
            id_k5: g.value(k5).item(),
        }
    }

    /// Current gate values along the soft search path, `(g_k5, g_e3, g_e6, g58, g916)`.
    pub fn gate_values(&self) -> [f64; 5] {
        let mut g = Graph::new();
        let vars = self.register_constants(&mut g);
        let c = self
            .compose(&mut g, &vars, ArchMode::Soft, QuantMode::BitSharing)
            .expect("well-formed layer");
        let gt = c.gates;
        [gt.g_k5, gt.g_e3, gt.g_e6, gt.g58, gt.g916].map(|v| g.value(v).item())
    }

    /// Discrete block from the indicator signs. Layers without a residual never skip.
    pub fn select_block(&self) -> BlockChoice {
        let ids = self.indicators();
        let id_e3 = if self.config.allows_skip() { ids.id_e3 } else { ids.id_e3.abs() };
        BlockChoice::from_indicators(id_e3, ids.id_e6, ids.id_k5)
    }

    pub fn select_quant(&self) -> QuantChoice {
        quant::select_quant(&self.weight_tensors(), &self.quant)
    }

    /// Zeroes every weight the block leaves out.
    pub fn apply_mask(&mut self, block: BlockChoice) {
        let masks = BlockMasks::new(&self.config, block);
        for (t, m) in [
            (&mut self.expand_weight, &masks.expand),
            (&mut self.dw_weight, &masks.depthwise),
            (&mut self.project_weight, &masks.project),
        ] {
            for (v, &keep) in t.data_mut().iter_mut().zip(m) {
                if !keep {
                    *v = 0.0;
                }
            }
        }
    }
}

/// Kernel-shape composition evaluated directly: `w_k = centre + sigma(||ring||^2 - t_k5) * ring`.
pub fn compose_kernel_shape(dw: &Tensor, t_k5: f64) -> (Tensor, f64) {
    let kk = KERNEL * KERNEL;
    let ring_norm: f64 = dw
        .data()
        .iter()
        .enumerate()
        .filter(|(i, _)| is_ring((i % kk) / KERNEL, i % KERNEL))
        .map(|(_, v)| v * v)
        .sum();
    let gate = quant::sigmoid(ring_norm - t_k5);
    let out = Tensor::from_fn(dw.shape(), |i| {
        let v = dw.data()[i];
        if is_ring((i % kk) / KERNEL, i % KERNEL) {
            gate * v
        } else {
            v
        }
    });
    (out, gate)
}

/// Expansion composition evaluated directly on `w_k`: the first half of the
/// channels scaled by `g_e3`, the second half by `g_e3 * g_e6`.
pub fn compose_expansion(w_k: &Tensor, c_in: usize, t_e3: f64, t_e6: f64) -> (Tensor, (f64, f64)) {
    let kk = KERNEL * KERNEL;
    let half = 3 * c_in;
    let first: f64 = w_k.data()[..half * kk].iter().map(|v| v * v).sum();
    let g_e3 = quant::sigmoid(first - t_e3);
    let g_e6 = quant::sigmoid(first - t_e6);
    let out = Tensor::from_fn(w_k.shape(), |i| {
        let scale = if i / kk < half { g_e3 } else { g_e3 * g_e6 };
        w_k.data()[i] * scale
    });
    (out, (g_e3, g_e6))
}

/// `||group||^2 - threshold`.
pub fn id_indicator(group: &Tensor, threshold: f64) -> f64 {
    group.squared_l2() - threshold
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(c_in: usize, c_out: usize, stride: usize, seed: u64) -> SuperKernelLayer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SuperKernelLayer::init(LayerConfig::new(0, c_in, c_out, stride).unwrap(), &mut rng)
    }

    #[test]
    fn indicator_examples() {
        let g = Tensor::from_vec(vec![0.3, 0.4]);
        assert!((id_indicator(&g, 0.2) - 0.05).abs() < 1e-15);
        assert_eq!(id_indicator(&Tensor::zeros(&[3]), 0.0), 0.0);
        assert_eq!(id_indicator(&g, g.squared_l2()), 0.0);
    }

    #[test]
    fn block_table_rows() {
        assert_eq!(BlockChoice::from_indicators(1.0, 1.0, 1.0), BlockChoice::K5E6);
        assert_eq!(BlockChoice::from_indicators(1.0, 1.0, -1.0), BlockChoice::K3E6);
        assert_eq!(BlockChoice::from_indicators(1.0, -1.0, 1.0), BlockChoice::K5E3);
        assert_eq!(BlockChoice::from_indicators(1.0, -1.0, -1.0), BlockChoice::K3E3);
        assert_eq!(BlockChoice::from_indicators(-1.0, 1.0, 1.0), BlockChoice::Skip);
        assert_eq!(BlockChoice::from_indicators(0.0, 0.0, 0.0), BlockChoice::K5E6);
    }

    #[test]
    fn tags_round_trip() {
        for b in BlockChoice::ALL {
            assert_eq!(BlockChoice::from_tag(b.tag()), Some(b));
        }
        assert_eq!(BlockChoice::from_tag(9), None);
    }

    #[test]
    fn partitions_are_disjoint_and_complete() {
        let cfg = LayerConfig::new(0, 3, 3, 1).unwrap();
        let n = cfg.c_max() * 25;
        let mut count = vec![0u8; n];
        for r in KernelRegion::ALL {
            for (i, m) in BlockMasks::depthwise_region_mask(&cfg, r).into_iter().enumerate() {
                count[i] += m as u8;
            }
        }
        assert!(count.iter().all(|&c| c == 1));
        for b in BlockChoice::ALL {
            let masks = BlockMasks::new(&cfg, b);
            let selected = masks.depthwise.iter().filter(|&&m| m).count();
            let expected: usize = b.regions().iter().map(|r| BlockMasks::region_size(&cfg, *r)).sum();
            assert_eq!(selected, expected);
        }
    }

    #[test]
    fn balanced_layer_gates_start_at_half() {
        let l = layer(2, 2, 1, 21);
        for v in l.gate_values() {
            assert!((v - 0.5).abs() < 1e-12, "{v}");
        }
        assert_eq!(l.select_block(), BlockChoice::K5E6);
    }

    #[test]
    fn kernel_shape_saturation() {
        let l = layer(2, 2, 1, 22);
        let (closed, g) = compose_kernel_shape(&l.dw_weight, 1e6);
        assert!(g < 1e-100);
        let (open, g) = compose_kernel_shape(&l.dw_weight, -1e6);
        assert_eq!(g, 1.0);
        assert_eq!(open, l.dw_weight);
        for i in 0..closed.len() {
            let p = i % 25;
            if is_ring(p / 5, p % 5) {
                assert!(closed.data()[i].abs() < 1e-100);
            } else {
                assert_eq!(closed.data()[i], l.dw_weight.data()[i]);
            }
        }
        let ring_norm: f64 = (0..l.dw_weight.len())
            .filter(|i| is_ring((i % 25) / 5, i % 5))
            .map(|i| l.dw_weight.data()[i].powi(2))
            .sum();
        let (half, g) = compose_kernel_shape(&l.dw_weight, ring_norm);
        assert_eq!(g, 0.5);
        assert_eq!(half.data()[0], 0.5 * l.dw_weight.data()[0]);
    }

    #[test]
    fn expansion_gate_cases() {
        let l = layer(2, 2, 1, 23);
        let w = &l.dw_weight;
        let (skip, (g3, _)) = compose_expansion(w, 2, 1e6, 0.0);
        assert!(g3 < 1e-100);
        assert!(skip.data().iter().all(|v| v.abs() < 1e-100));
        let (r3, (g3, g6)) = compose_expansion(w, 2, -1e6, 1e6);
        assert_eq!(g3, 1.0);
        assert!(g6 < 1e-100);
        assert_eq!(&r3.data()[..6 * 25], &w.data()[..6 * 25]);
        assert!(r3.data()[6 * 25..].iter().all(|v| v.abs() < 1e-100));
        let (full, _) = compose_expansion(w, 2, -1e6, -1e6);
        assert_eq!(&full, w);
    }

    #[test]
    fn graph_composition_matches_direct_route() {
        let mut l = layer(2, 2, 1, 24);
        l.arch.t_k5 *= 0.8;
        l.arch.t_e3 *= 0.7;
        l.arch.t_e6 *= 1.3;
        l.temperature = GateTemperature::default();
        let (w_k, gk) = compose_kernel_shape(&l.dw_weight, l.arch.t_k5);
        let (w_hat, (g3, g6)) = compose_expansion(&w_k, 2, l.arch.t_e3, l.arch.t_e6);
        let mut g = Graph::new();
        let v = l.register(&mut g);
        let c = l.compose(&mut g, &v, ArchMode::Soft, QuantMode::Off).unwrap();
        assert!((g.value(c.gates.g_k5).item() - gk).abs() < 1e-15);
        assert!((g.value(c.gates.g_e3).item() - g3).abs() < 1e-15);
        assert!((g.value(c.gates.g_e6).item() - g6).abs() < 1e-15);
        for (a, b) in g.value(c.depthwise).data().iter().zip(w_hat.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn temperature_divides_indicator() {
        let mut l = layer(2, 2, 1, 26);
        l.arch.t_k5 *= 0.9;
        l.arch.t_e3 *= 1.2;
        let ids = l.indicators();
        let tau = l.temperature;
        let gates = l.gate_values();
        assert!((gates[0] - quant::sigmoid(ids.id_k5 / tau.k5)).abs() < 1e-15);
        assert!((gates[1] - quant::sigmoid(ids.id_e3 / tau.e3)).abs() < 1e-15);
        assert!((gates[2] - quant::sigmoid(ids.id_e6 / tau.e6)).abs() < 1e-15);
        assert!(tau.k5 > 0.0 && tau.e3 > 0.0 && tau.q58 > 0.0 && tau.q916 > 0.0);
    }

    #[test]
    fn select_block_follows_threshold_signs() {
        let mut l = layer(2, 2, 1, 25);
        l.arch.t_e3 = 1e9;
        assert_eq!(l.select_block(), BlockChoice::Skip);
        l.arch.t_e3 = -1e9;
        l.arch.t_e6 = 1e9;
        l.arch.t_k5 = 1e9;
        assert_eq!(l.select_block(), BlockChoice::K3E3);
        // a downsampling layer never skips
        let mut d = layer(2, 4, 2, 26);
        d.arch.t_e3 = 1e9;
        assert!(!d.select_block().is_skip());
    }

    #[test]
    fn skip_gate_yields_residual() {
        let mut l = layer(2, 2, 1, 27);
        l.arch.t_e3 = 1e9;
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let xt = Tensor::from_fn(&[2, 2, 4, 4], |_| rng.random_range(-1.0..1.0));
        let mut g = Graph::new();
        let v = l.register(&mut g);
        let x = g.constant(xt.clone());
        let (y, _) = l.forward(&mut g, &v, x, ArchMode::Soft, QuantMode::BitSharing).unwrap();
        for (a, b) in g.value(y).data().iter().zip(xt.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_input_zero_branch() {
        let l = layer(2, 3, 1, 29);
        let mut g = Graph::new();
        let v = l.register(&mut g);
        let x = g.constant(Tensor::zeros(&[1, 2, 3, 3]));
        let (y, _) = l.forward(&mut g, &v, x, ArchMode::Soft, QuantMode::Off).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_channel_count() {
        let l = layer(2, 2, 1, 30);
        let mut g = Graph::new();
        let v = l.register(&mut g);
        let x = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
        assert!(matches!(
            l.forward(&mut g, &v, x, ArchMode::Soft, QuantMode::Off),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn ring_gate_is_monotone_in_threshold() {
        let l = layer(2, 2, 1, 31);
        let mut prev = f64::INFINITY;
        for step in -20..20 {
            let (_, gate) = compose_kernel_shape(&l.dw_weight, l.arch.t_k5 + step as f64 * 0.37);
            assert!(gate <= prev);
            prev = gate;
        }
    }
}
