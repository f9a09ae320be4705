use super::kernels::{self, DwGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    Pointwise {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Depthwise {
        input: Var,
        weight: Var,
        stride: usize,
    },
    Affine {
        input: Var,
        scale: Var,
        shift: Var,
    },
    Relu6(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    SquaredL2(Var),
    Sum(Var),
    ScaleAxis {
        input: Var,
        scale: Var,
        axis: usize,
    },
    StraightThrough(Var),
    GlobalAvgPool(Var),
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so the node list
/// is already a topological order of the (acyclic) computation graph.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every node that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros shaped like `like` when no path reaches it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

fn nchw(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::Dimension {
            op,
            axis: "rank",
            expected: 4,
            actual: t.shape().len(),
        }),
    }
}

fn check(op: &'static str, axis: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Dimension {
            op,
            axis,
            expected,
            actual,
        })
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Constant, t, false)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(Tensor::scalar(x))
    }

    /// 1x1 convolution. `weight` is `[C_out, C, 1, 1]`, `bias` is `[C_out]`.
    pub fn conv2d_pointwise(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let (n, c, h, wd) = nchw(x, "conv2d_pointwise")?;
        let (co, wc) = match *w.shape() {
            [co, wc, 1, 1] => (co, wc),
            [co, wc] => (co, wc),
            _ => {
                return Err(Error::Dimension {
                    op: "conv2d_pointwise",
                    axis: "weight rank",
                    expected: 4,
                    actual: w.shape().len(),
                })
            }
        };
        check("conv2d_pointwise", "input channels", wc, c)?;
        let b = match bias {
            Some(b) => {
                let bt = self.value(b);
                check("conv2d_pointwise", "bias length", co, bt.len())?;
                Some(bt.data())
            }
            None => None,
        };
        let out = kernels::pointwise_forward(x.data(), n, c, h * wd, w.data(), b, co);
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        let value = Tensor::new(vec![n, co, h, wd], out)?;
        Ok(self.push(Op::Pointwise { input, weight, bias }, value, rg))
    }

    /// Depthwise k x k convolution with same padding. `weight` is `[C, k, k]`.
    pub fn conv2d_depthwise(&mut self, input: Var, weight: Var, stride: usize) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let (n, c, h, wd) = nchw(x, "conv2d_depthwise")?;
        let (wc, k) = match *w.shape() {
            [wc, k1, k2] if k1 == k2 => (wc, k1),
            _ => {
                return Err(Error::Dimension {
                    op: "conv2d_depthwise",
                    axis: "kernel shape",
                    expected: 3,
                    actual: w.shape().len(),
                })
            }
        };
        if k % 2 == 0 {
            return Err(Error::config(format!("depthwise kernel size must be odd, got {k}")));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::config(format!("depthwise stride must be 1 or 2, got {stride}")));
        }
        check("conv2d_depthwise", "channels", wc, c)?;
        let geo = DwGeom { n, c, h, w: wd, k, stride };
        let (ho, wo) = geo.out_hw();
        let out = kernels::depthwise_forward(x.data(), w.data(), &geo);
        let rg = self.rg(input) || self.rg(weight);
        let value = Tensor::new(vec![n, c, ho, wo], out)?;
        Ok(self.push(Op::Depthwise { input, weight, stride }, value, rg))
    }

    /// Per-channel `scale * x + shift`.
    pub fn affine_channel(&mut self, input: Var, scale: Var, shift: Var) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = nchw(x, "affine_channel")?;
        let s = self.value(scale);
        let t = self.value(shift);
        check("affine_channel", "scale length", c, s.len())?;
        check("affine_channel", "shift length", c, t.len())?;
        let hw = h * w;
        let mut out = x.data().to_vec();
        for ni in 0..n {
            for ci in 0..c {
                let (sv, tv) = (s.data()[ci], t.data()[ci]);
                for o in &mut out[(ni * c + ci) * hw..(ni * c + ci + 1) * hw] {
                    *o = sv * *o + tv;
                }
            }
        }
        let rg = self.rg(input) || self.rg(scale) || self.rg(shift);
        let value = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(Op::Affine { input, scale, shift }, value, rg))
    }

    pub fn relu6(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.clamp(0.0, 6.0));
        let rg = self.rg(x);
        self.push(Op::Relu6(x), value, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(Op::Sigmoid(x), value, rg)
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)
        } else if tb.is_scalar() {
            let y = tb.item();
            Ok(ta.map(|x| f(x, y)))
        } else if ta.is_scalar() {
            let x = ta.item();
            Ok(tb.map(|y| f(x, y)))
        } else {
            Err(Error::Dimension {
                op,
                axis: "element count",
                expected: ta.len(),
                actual: tb.len(),
            })
        }
    }

    /// Elementwise sum; either operand may be a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), value, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Sub(a, b), value, rg))
    }

    /// Elementwise product; either operand may be a scalar.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul(a, b), value, rg))
    }

    /// Multiplication by a fixed real.
    pub fn scalar_mul(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let rg = self.rg(x);
        self.push(Op::Scale(x, factor), value, rg)
    }

    /// Addition of a fixed real.
    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v + c);
        let rg = self.rg(x);
        self.push(Op::Offset(x), value, rg)
    }

    pub fn squared_l2(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).squared_l2());
        let rg = self.rg(x);
        self.push(Op::SquaredL2(x), value, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        let rg = self.rg(x);
        self.push(Op::Sum(x), value, rg)
    }

    /// Multiplies every slice along `axis` by the matching entry of the vector `scale`.
    pub fn scale_axis(&mut self, input: Var, scale: Var, axis: usize) -> Result<Var> {
        let x = self.value(input);
        let s = self.value(scale);
        if axis >= x.shape().len() {
            return Err(Error::Usage(format!("axis {axis} out of range for rank {}", x.shape().len())));
        }
        let mid = x.shape()[axis];
        check("scale_axis", "scaled axis", mid, s.len())?;
        let inner: usize = x.shape()[axis + 1..].iter().product();
        let mut out = x.data().to_vec();
        for (chunk_idx, chunk) in out.chunks_mut(inner.max(1)).enumerate() {
            let sv = s.data()[chunk_idx % mid];
            chunk.iter_mut().for_each(|v| *v *= sv);
        }
        let rg = self.rg(input) || self.rg(scale);
        let value = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(Op::ScaleAxis { input, scale, axis }, value, rg))
    }

    /// Node whose forward value is `forward` but whose backward pass is the
    /// identity onto `input`.
    pub fn straight_through(&mut self, input: Var, forward: Tensor) -> Result<Var> {
        check("straight_through", "element count", self.value(input).len(), forward.len())?;
        let forward = forward.reshape(self.value(input).shape().to_vec())?;
        let rg = self.rg(input);
        Ok(self.push(Op::StraightThrough(input), forward, rg))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = nchw(x, "global_avg_pool")?;
        let hw = h * w;
        let data = x
            .data()
            .chunks(hw)
            .map(|ch| ch.iter().sum::<f64>() / hw as f64)
            .collect();
        let rg = self.rg(input);
        let value = Tensor::new(vec![n, c], data)?;
        Ok(self.push(Op::GlobalAvgPool(input), value, rg))
    }

    /// Fully connected layer: `[N, F] x [O, F]^T + [O]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        let (n, f) = match *x.shape() {
            [n, f] => (n, f),
            _ => {
                return Err(Error::Dimension {
                    op: "dense",
                    axis: "input rank",
                    expected: 2,
                    actual: x.shape().len(),
                })
            }
        };
        let o = w.shape().first().copied().unwrap_or(0);
        check("dense", "weight shape", o * f, w.len())?;
        check("dense", "bias length", o, b.len())?;
        let mut out = vec![0.0; n * o];
        for ni in 0..n {
            let xr = &x.data()[ni * f..(ni + 1) * f];
            for oi in 0..o {
                let wr = &w.data()[oi * f..(oi + 1) * f];
                out[ni * o + oi] = b.data()[oi] + xr.iter().zip(wr).map(|(a, c)| a * c).sum::<f64>();
            }
        }
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        let value = Tensor::new(vec![n, o], out)?;
        Ok(self.push(Op::Dense { input, weight, bias }, value, rg))
    }

    /// Batch-mean softmax cross-entropy of `[N, K]` logits against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        let (n, k) = match *z.shape() {
            [n, k] => (n, k),
            _ => {
                return Err(Error::Dimension {
                    op: "softmax_cross_entropy",
                    axis: "logits rank",
                    expected: 2,
                    actual: z.shape().len(),
                })
            }
        };
        check("softmax_cross_entropy", "batch", n, labels.len())?;
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Data(format!("label {bad} out of range for {k} classes")));
        }
        let mut total = 0.0;
        for (ni, &label) in labels.iter().enumerate() {
            let row = &z.data()[ni * k..(ni + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        let value = Tensor::scalar(total / n.max(1) as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            value,
            rg,
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accum<'a>(&self, grads: &'a mut [Option<Tensor>], v: Var) -> Option<&'a mut [f64]> {
        if !self.rg(v) {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[v.0].value.shape()));
        }
        slot.as_mut().map(|t| t.data_mut())
    }

    /// Adds `g` into the gradient of `v`, reducing to a scalar when `v` was broadcast.
    fn accum_broadcast(&self, grads: &mut [Option<Tensor>], v: Var, g: impl Iterator<Item = f64>) {
        let scalar = self.value(v).len() == 1;
        if let Some(dst) = self.accum(grads, v) {
            if scalar {
                dst[0] += g.sum::<f64>();
            } else {
                for (d, x) in dst.iter_mut().zip(g) {
                    *d += x;
                }
            }
        }
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match op {
            Op::Leaf | Op::Constant => {}
            Op::Pointwise { input, weight, bias } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (n, c, h, wd) = nchw(x, "conv2d_pointwise").expect("checked in forward");
                let co = w.shape()[0];
                // split borrows: take each gradient buffer out, then restore
                let mut gx = self.take_grad(grads, *input);
                let mut gw = self.take_grad(grads, *weight);
                let mut gb = bias.and_then(|b| self.take_grad(grads, b));
                kernels::pointwise_backward(
                    x.data(),
                    n,
                    c,
                    h * wd,
                    w.data(),
                    co,
                    gd,
                    gx.as_mut().map(|t| t.data_mut()),
                    gw.as_mut().map(|t| t.data_mut()),
                    gb.as_mut().map(|t| t.data_mut()),
                );
                self.restore(grads, *input, gx);
                self.restore(grads, *weight, gw);
                if let Some(b) = bias {
                    self.restore(grads, *b, gb);
                }
            }
            Op::Depthwise { input, weight, stride } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (n, c, h, wd) = nchw(x, "conv2d_depthwise").expect("checked in forward");
                let geo = DwGeom {
                    n,
                    c,
                    h,
                    w: wd,
                    k: w.shape()[1],
                    stride: *stride,
                };
                let mut gx = self.take_grad(grads, *input);
                let mut gw = self.take_grad(grads, *weight);
                kernels::depthwise_backward(
                    x.data(),
                    w.data(),
                    &geo,
                    gd,
                    gx.as_mut().map(|t| t.data_mut()),
                    gw.as_mut().map(|t| t.data_mut()),
                );
                self.restore(grads, *input, gx);
                self.restore(grads, *weight, gw);
            }
            Op::Affine { input, scale, shift } => {
                let x = self.value(*input);
                let (n, c, h, w) = nchw(x, "affine_channel").expect("checked in forward");
                let hw = h * w;
                let s = self.value(*scale).data().to_vec();
                if let Some(gx) = self.accum(grads, *input) {
                    for ni in 0..n {
                        for ci in 0..c {
                            let r = (ni * c + ci) * hw..(ni * c + ci + 1) * hw;
                            for (d, gv) in gx[r.clone()].iter_mut().zip(&gd[r]) {
                                *d += s[ci] * gv;
                            }
                        }
                    }
                }
                let mut gs = vec![0.0; c];
                let mut gt = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let r = (ni * c + ci) * hw..(ni * c + ci + 1) * hw;
                        gs[ci] += gd[r.clone()].iter().zip(&x.data()[r.clone()]).map(|(a, b)| a * b).sum::<f64>();
                        gt[ci] += gd[r].iter().sum::<f64>();
                    }
                }
                self.accum_broadcast(grads, *scale, gs.into_iter());
                self.accum_broadcast(grads, *shift, gt.into_iter());
            }
            Op::Relu6(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.accum(grads, *x) {
                    for ((d, &v), &gv) in gx.iter_mut().zip(xv).zip(gd) {
                        if v > 0.0 && v < 6.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = self.accum(grads, *x) {
                    for ((d, &s), &gv) in gx.iter_mut().zip(out.data()).zip(gd) {
                        *d += gv * s * (1.0 - s);
                    }
                }
            }
            Op::Add(a, b) => {
                self.accum_broadcast(grads, *a, gd.iter().copied());
                self.accum_broadcast(grads, *b, gd.iter().copied());
            }
            Op::Sub(a, b) => {
                self.accum_broadcast(grads, *a, gd.iter().copied());
                self.accum_broadcast(grads, *b, gd.iter().map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let pick = |t: &Tensor, i: usize| if t.len() == 1 { t.data()[0] } else { t.data()[i] };
                let ga: Vec<f64> = (0..gd.len()).map(|i| gd[i] * pick(tb, i)).collect();
                let gb: Vec<f64> = (0..gd.len()).map(|i| gd[i] * pick(ta, i)).collect();
                self.accum_broadcast(grads, *a, ga.into_iter());
                self.accum_broadcast(grads, *b, gb.into_iter());
            }
            Op::Scale(x, f) => {
                self.accum_broadcast(grads, *x, gd.iter().map(|v| v * f));
            }
            Op::Offset(x) | Op::StraightThrough(x) => {
                self.accum_broadcast(grads, *x, gd.iter().copied());
            }
            Op::SquaredL2(x) => {
                let gv = gd[0];
                let xv = self.value(*x).data();
                if let Some(gx) = self.accum(grads, *x) {
                    for (d, &v) in gx.iter_mut().zip(xv) {
                        *d += 2.0 * v * gv;
                    }
                }
            }
            Op::Sum(x) => {
                let gv = gd[0];
                if let Some(gx) = self.accum(grads, *x) {
                    gx.iter_mut().for_each(|d| *d += gv);
                }
            }
            Op::ScaleAxis { input, scale, axis } => {
                let x = self.value(*input);
                let s = self.value(*scale).data();
                let mid = x.shape()[*axis];
                let inner: usize = x.shape()[axis + 1..].iter().product::<usize>().max(1);
                if let Some(gx) = self.accum(grads, *input) {
                    for (chunk_idx, (dst, src)) in gx.chunks_mut(inner).zip(gd.chunks(inner)).enumerate() {
                        let sv = s[chunk_idx % mid];
                        for (d, v) in dst.iter_mut().zip(src) {
                            *d += sv * v;
                        }
                    }
                }
                let mut gs = vec![0.0; mid];
                for (chunk_idx, (xs, gs_chunk)) in x.data().chunks(inner).zip(gd.chunks(inner)).enumerate() {
                    gs[chunk_idx % mid] += xs.iter().zip(gs_chunk).map(|(a, b)| a * b).sum::<f64>();
                }
                self.accum_broadcast(grads, *scale, gs.into_iter());
            }
            Op::GlobalAvgPool(x) => {
                let shape = self.value(*x).shape().to_vec();
                let hw = shape[2] * shape[3];
                if let Some(gx) = self.accum(grads, *x) {
                    for (chunk, &gv) in gx.chunks_mut(hw).zip(gd) {
                        chunk.iter_mut().for_each(|d| *d += gv / hw as f64);
                    }
                }
            }
            Op::Dense { input, weight, bias } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (n, f) = (x.shape()[0], x.shape()[1]);
                let o = w.shape()[0];
                if let Some(gx) = self.accum(grads, *input) {
                    for ni in 0..n {
                        for oi in 0..o {
                            let gv = gd[ni * o + oi];
                            for fi in 0..f {
                                gx[ni * f + fi] += gv * w.data()[oi * f + fi];
                            }
                        }
                    }
                }
                if let Some(gw) = self.accum(grads, *weight) {
                    for ni in 0..n {
                        for oi in 0..o {
                            let gv = gd[ni * o + oi];
                            for fi in 0..f {
                                gw[oi * f + fi] += gv * x.data()[ni * f + fi];
                            }
                        }
                    }
                }
                if let Some(gb) = self.accum(grads, *bias) {
                    for ni in 0..n {
                        for oi in 0..o {
                            gb[oi] += gd[ni * o + oi];
                        }
                    }
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let z = self.value(*logits);
                let k = z.shape()[1];
                let n = labels.len();
                let scale = gd[0] / n.max(1) as f64;
                if let Some(gz) = self.accum(grads, *logits) {
                    for (ni, &label) in labels.iter().enumerate() {
                        let row = &z.data()[ni * k..(ni + 1) * k];
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = row.iter().map(|v| (v - m).exp()).sum();
                        for (ki, &v) in row.iter().enumerate() {
                            let p = (v - m).exp() / denom;
                            let y = if ki == label { 1.0 } else { 0.0 };
                            gz[ni * k + ki] += scale * (p - y);
                        }
                    }
                }
            }
        }
    }

    fn take_grad(&self, grads: &mut [Option<Tensor>], v: Var) -> Option<Tensor> {
        if !self.rg(v) {
            return None;
        }
        Some(
            grads[v.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape())),
        )
    }

    fn restore(&self, grads: &mut [Option<Tensor>], v: Var, t: Option<Tensor>) {
        if let Some(t) = t {
            grads[v.0] = Some(t);
        }
    }
}
