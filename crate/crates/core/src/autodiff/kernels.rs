//! Raw slice kernels behind the graph operations. Layouts are row-major NCHW.

pub(crate) fn pointwise_forward(
    x: &[f64],
    n: usize,
    c: usize,
    hw: usize,
    w: &[f64],
    bias: Option<&[f64]>,
    co: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; n * co * hw];
    for ni in 0..n {
        let xs = &x[ni * c * hw..(ni + 1) * c * hw];
        for o in 0..co {
            let dst = &mut out[(ni * co + o) * hw..(ni * co + o + 1) * hw];
            if let Some(b) = bias {
                dst.fill(b[o]);
            }
            let wrow = &w[o * c..(o + 1) * c];
            for (ci, &wv) in wrow.iter().enumerate() {
                if wv == 0.0 {
                    continue;
                }
                let src = &xs[ci * hw..(ci + 1) * hw];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += wv * s;
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn pointwise_backward(
    x: &[f64],
    n: usize,
    c: usize,
    hw: usize,
    w: &[f64],
    co: usize,
    g: &[f64],
    gx: Option<&mut [f64]>,
    gw: Option<&mut [f64]>,
    gb: Option<&mut [f64]>,
) {
    if let Some(gx) = gx {
        for ni in 0..n {
            for o in 0..co {
                let src = &g[(ni * co + o) * hw..(ni * co + o + 1) * hw];
                for ci in 0..c {
                    let wv = w[o * c + ci];
                    if wv == 0.0 {
                        continue;
                    }
                    let dst = &mut gx[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += wv * s;
                    }
                }
            }
        }
    }
    if let Some(gw) = gw {
        for ni in 0..n {
            for o in 0..co {
                let go = &g[(ni * co + o) * hw..(ni * co + o + 1) * hw];
                for ci in 0..c {
                    let xs = &x[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                    let dot: f64 = go.iter().zip(xs).map(|(a, b)| a * b).sum();
                    gw[o * c + ci] += dot;
                }
            }
        }
    }
    if let Some(gb) = gb {
        for ni in 0..n {
            for (o, b) in gb.iter_mut().enumerate() {
                *b += g[(ni * co + o) * hw..(ni * co + o + 1) * hw].iter().sum::<f64>();
            }
        }
    }
}

/// Output index range `[lo, hi)` for which `i * stride + offset - pad` lands in `[0, len)`.
fn valid_range(out_len: usize, len: usize, stride: usize, tap: usize, pad: usize) -> (usize, usize) {
    // need 0 <= i*s + tap - pad < len
    let lo = if tap >= pad { 0 } else { (pad - tap).div_ceil(stride) };
    if len + pad <= tap {
        return (0, 0);
    }
    let hi = (len + pad - tap).div_ceil(stride).min(out_len);
    (lo.min(hi), hi)
}

pub(crate) struct DwGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
}

impl DwGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (self.h.div_ceil(self.stride), self.w.div_ceil(self.stride))
    }
}

pub(crate) fn depthwise_forward(x: &[f64], weight: &[f64], geo: &DwGeom) -> Vec<f64> {
    let (ho, wo) = geo.out_hw();
    let DwGeom { n, c, h, w, k, stride } = *geo;
    let pad = (k - 1) / 2;
    let mut out = vec![0.0; n * c * ho * wo];
    for ni in 0..n {
        for ci in 0..c {
            let xs = &x[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
            let dst = &mut out[(ni * c + ci) * ho * wo..(ni * c + ci + 1) * ho * wo];
            for a in 0..k {
                let (ilo, ihi) = valid_range(ho, h, stride, a, pad);
                for b in 0..k {
                    let wv = weight[(ci * k + a) * k + b];
                    if wv == 0.0 {
                        continue;
                    }
                    let (jlo, jhi) = valid_range(wo, w, stride, b, pad);
                    for i in ilo..ihi {
                        let ii = i * stride + a - pad;
                        let row = &xs[ii * w..(ii + 1) * w];
                        let orow = &mut dst[i * wo..(i + 1) * wo];
                        if stride == 1 {
                            let off = jlo + b - pad;
                            for (o, s) in orow[jlo..jhi].iter_mut().zip(&row[off..off + (jhi - jlo)]) {
                                *o += wv * s;
                            }
                        } else {
                            for j in jlo..jhi {
                                orow[j] += wv * row[j * stride + b - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn depthwise_backward(
    x: &[f64],
    weight: &[f64],
    geo: &DwGeom,
    g: &[f64],
    gx: Option<&mut [f64]>,
    gw: Option<&mut [f64]>,
) {
    let (ho, wo) = geo.out_hw();
    let DwGeom { n, c, h, w, k, stride } = *geo;
    let pad = (k - 1) / 2;
    let mut gx = gx;
    let mut gw = gw;
    for ni in 0..n {
        for ci in 0..c {
            let base_in = (ni * c + ci) * h * w;
            let gs = &g[(ni * c + ci) * ho * wo..(ni * c + ci + 1) * ho * wo];
            for a in 0..k {
                let (ilo, ihi) = valid_range(ho, h, stride, a, pad);
                for b in 0..k {
                    let widx = (ci * k + a) * k + b;
                    let wv = weight[widx];
                    let (jlo, jhi) = valid_range(wo, w, stride, b, pad);
                    if let Some(gw) = gw.as_deref_mut() {
                        let mut acc = 0.0;
                        for i in ilo..ihi {
                            let row = base_in + (i * stride + a - pad) * w;
                            for j in jlo..jhi {
                                acc += gs[i * wo + j] * x[row + j * stride + b - pad];
                            }
                        }
                        gw[widx] += acc;
                    }
                    if wv == 0.0 {
                        continue;
                    }
                    if let Some(gx) = gx.as_deref_mut() {
                        for i in ilo..ihi {
                            let row = base_in + (i * stride + a - pad) * w;
                            for j in jlo..jhi {
                                gx[row + j * stride + b - pad] += wv * gs[i * wo + j];
                            }
                        }
                    }
                }
            }
        }
    }
}
