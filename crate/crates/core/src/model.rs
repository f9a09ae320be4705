//! Searchable network: pointwise stem, a stack of super-kernel layers, and a
//! pooled dense classifier.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Gradients, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::quant::QuantChoice;
use crate::superkernel::{ArchMode, BlockChoice, LayerConfig, LayerGates, LayerVars, QuantMode, SuperKernelLayer};

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    /// `[C_0, C_img, 1, 1]`
    pub stem_weight: Tensor,
    pub stem_bias: Tensor,
    pub layers: Vec<SuperKernelLayer>,
    /// `[num_classes, C_last]`
    pub head_weight: Tensor,
    pub head_bias: Tensor,
}

#[derive(Clone, Debug)]
pub struct NetVars {
    pub stem_weight: Var,
    pub stem_bias: Var,
    pub layers: Vec<LayerVars>,
    pub head_weight: Var,
    pub head_bias: Var,
}

/// Which forward pass to build.
#[derive(Clone, Debug, PartialEq)]
pub enum NetMode {
    /// Soft architecture gates with bit-sharing quantization.
    Search,
    /// Soft architecture gates on full-precision weights.
    SearchFloat,
    /// Discrete per-layer blocks, optionally with fixed per-layer bit widths.
    Fixed {
        blocks: Vec<BlockChoice>,
        quant: Option<Vec<QuantChoice>>,
    },
}

#[derive(Clone, Debug)]
pub struct NetForward {
    pub logits: Var,
    /// `(layer_index, gates)` per searchable layer.
    pub gates: Vec<(usize, LayerGates)>,
}

fn normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let d = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| d.sample(rng))
}

impl Network {
    pub fn init(plan: &[LayerConfig], image_channels: usize, num_classes: usize, rng: &mut impl Rng) -> Result<Self> {
        let first = plan.first().ok_or_else(|| Error::config("layer plan needs at least one layer"))?;
        for pair in plan.windows(2) {
            if pair[0].c_out != pair[1].c_in {
                return Err(Error::config(format!(
                    "layer {} outputs {} channels but layer {} expects {}",
                    pair[0].index, pair[0].c_out, pair[1].index, pair[1].c_in
                )));
            }
        }
        let c0 = first.c_in;
        let c_last = plan.last().expect("non-empty").c_out;
        let stem_weight = normal(&[c0, image_channels, 1, 1], (2.0 / image_channels as f64).sqrt(), rng);
        let layers = plan.iter().map(|cfg| SuperKernelLayer::init(*cfg, rng)).collect();
        let head_weight = normal(&[num_classes, c_last], (1.0 / c_last as f64).sqrt(), rng);
        Ok(Network {
            stem_weight,
            stem_bias: Tensor::zeros(&[c0]),
            layers,
            head_weight,
            head_bias: Tensor::zeros(&[num_classes]),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.head_bias.len()
    }

    pub fn layer_configs(&self) -> Vec<LayerConfig> {
        self.layers.iter().map(|l| l.config).collect()
    }

    pub fn register(&self, g: &mut Graph) -> NetVars {
        NetVars {
            stem_weight: g.param(self.stem_weight.clone()),
            stem_bias: g.param(self.stem_bias.clone()),
            layers: self.layers.iter().map(|l| l.register(g)).collect(),
            head_weight: g.param(self.head_weight.clone()),
            head_bias: g.param(self.head_bias.clone()),
        }
    }

    pub fn forward(&self, g: &mut Graph, v: &NetVars, x: Var, mode: &NetMode) -> Result<NetForward> {
        let h = g.conv2d_pointwise(x, v.stem_weight, Some(v.stem_bias))?;
        let mut h = g.relu6(h);
        let mut gates = Vec::with_capacity(self.layers.len());
        for (i, (layer, lv)) in self.layers.iter().zip(&v.layers).enumerate() {
            let (arch, quant) = match mode {
                NetMode::Search => (ArchMode::Soft, QuantMode::BitSharing),
                NetMode::SearchFloat => (ArchMode::Soft, QuantMode::Off),
                NetMode::Fixed { blocks, quant } => {
                    let b = *blocks
                        .get(i)
                        .ok_or_else(|| Error::config(format!("no block given for layer {i}")))?;
                    let q = match quant {
                        Some(qs) => QuantMode::Hard(
                            *qs.get(i).ok_or_else(|| Error::config(format!("no bit width for layer {i}")))?,
                        ),
                        None => QuantMode::Off,
                    };
                    (ArchMode::Fixed(b), q)
                }
            };
            let (out, gt) = layer.forward(g, lv, h, arch, quant)?;
            gates.push((layer.config.index, gt));
            h = out;
        }
        let pooled = g.global_avg_pool(h)?;
        let logits = g.dense(pooled, v.head_weight, v.head_bias)?;
        Ok(NetForward { logits, gates })
    }

    /// Plain SGD on every parameter. Thresholds step at `lr_t * tau^2`, i.e. `t / tau`
    /// is learned at rate `lr_t`.
    pub fn apply_gradients(&mut self, v: &NetVars, grads: &Gradients, lr_w: f64, lr_t: f64) {
        let step = |t: &mut Tensor, var: Var, lr: f64| {
            if let Some(gr) = grads.get(var) {
                t.sgd_step(gr, lr);
            }
        };
        let scalar_step = |t: &mut f64, var: Var, lr: f64| {
            if let Some(gr) = grads.get(var) {
                *t -= lr * gr.item();
            }
        };
        step(&mut self.stem_weight, v.stem_weight, lr_w);
        step(&mut self.stem_bias, v.stem_bias, lr_w);
        step(&mut self.head_weight, v.head_weight, lr_w);
        step(&mut self.head_bias, v.head_bias, lr_w);
        for (l, lv) in self.layers.iter_mut().zip(&v.layers) {
            step(&mut l.expand_weight, lv.expand_weight, lr_w);
            step(&mut l.expand_affine.scale, lv.expand_scale, lr_w);
            step(&mut l.expand_affine.shift, lv.expand_shift, lr_w);
            step(&mut l.dw_weight, lv.dw_weight, lr_w);
            step(&mut l.dw_affine.scale, lv.dw_scale, lr_w);
            step(&mut l.dw_affine.shift, lv.dw_shift, lr_w);
            step(&mut l.project_weight, lv.project_weight, lr_w);
            step(&mut l.project_affine.scale, lv.project_scale, lr_w);
            step(&mut l.project_affine.shift, lv.project_shift, lr_w);
            let tau = l.temperature;
            scalar_step(&mut l.arch.t_k5, lv.t_k5, lr_t * tau.k5 * tau.k5);
            scalar_step(&mut l.arch.t_e3, lv.t_e3, lr_t * tau.e3 * tau.e3);
            scalar_step(&mut l.arch.t_e6, lv.t_e6, lr_t * tau.e6 * tau.e6);
            scalar_step(&mut l.quant.t_q58, lv.t_q58, lr_t * tau.q58 * tau.q58);
            scalar_step(&mut l.quant.t_q916, lv.t_q916, lr_t * tau.q916 * tau.q916);
        }
    }

    pub fn select_blocks(&self) -> Vec<BlockChoice> {
        self.layers.iter().map(|l| l.select_block()).collect()
    }

    pub fn select_quant(&self) -> Vec<QuantChoice> {
        self.layers.iter().map(|l| l.select_quant()).collect()
    }

    pub fn all_finite(&self) -> bool {
        let layer_ok = |l: &SuperKernelLayer| {
            [&l.expand_weight, &l.dw_weight, &l.project_weight].iter().all(|t| t.all_finite())
                && [&l.expand_affine, &l.dw_affine, &l.project_affine]
                    .iter()
                    .all(|a| a.scale.all_finite() && a.shift.all_finite())
                && [l.arch.t_k5, l.arch.t_e3, l.arch.t_e6, l.quant.t_q58, l.quant.t_q916]
                    .iter()
                    .all(|v| v.is_finite())
        };
        self.stem_weight.all_finite()
            && self.stem_bias.all_finite()
            && self.head_weight.all_finite()
            && self.head_bias.all_finite()
            && self.layers.iter().all(layer_ok)
    }
}
