//! Binary message layout (all integers and reals big-endian):
//!
//! ```text
//! header   "FAQS" | version u8 | round u32 | client_id u16 | layer_count u16
//! layer    tag u8 | qbits u8 | c_in u16 | c_out u16
//!          [w_min f32, w_max f32] per coded non-empty tensor (expand, depthwise, project)
//!          codes of the three tensors, packed qbits-wide, padded to a byte
//!            (or raw f32 values when qbits = 32)
//!          affine f32 values
//!          five thresholds f32 unless tag has bit 0x80 set
//! dense    qbits u8 | C_0 u16 | C_img u16 | classes u16 | C_last u16
//!          bounds and packed codes of stem then head weights, stem bias f32, head bias f32
//! ```
//!
//! Everything except the header, the fixed per-section prefixes and the code padding is
//! counted by the ledger.

use super::message::{DenseUpdate, LayerUpdate, MaskedUpdate, Precision, SelectedIndices, TensorPayload};
use crate::error::{Error, Result};
use crate::superkernel::BlockChoice;

pub const MAGIC: &[u8; 4] = b"FAQS";
pub const VERSION: u8 = 1;
pub const HEADER_BYTES: usize = 13;
pub const LAYER_PREFIX_BYTES: usize = 6;
pub const DENSE_PREFIX_BYTES: usize = 9;
const NO_THRESHOLDS: u8 = 0x80;

struct BitWriter<'a> {
    out: &'a mut Vec<u8>,
    acc: u64,
    n: u32,
}

impl<'a> BitWriter<'a> {
    fn new(out: &'a mut Vec<u8>) -> Self {
        BitWriter { out, acc: 0, n: 0 }
    }

    fn push(&mut self, value: u16, bits: u32) {
        self.acc = (self.acc << bits) | (value as u64 & ((1u64 << bits) - 1));
        self.n += bits;
        while self.n >= 8 {
            self.n -= 8;
            self.out.push((self.acc >> self.n) as u8);
        }
    }

    fn finish(self) {
        if self.n > 0 {
            self.out.push((self.acc << (8 - self.n)) as u8);
        }
    }
}

fn padding_bits(n_codes: usize, bits: u32) -> u64 {
    let total = n_codes as u64 * bits as u64;
    (8 - total % 8) % 8
}

fn coded_parts<'p>(payloads: &[&'p TensorPayload]) -> Vec<(&'p [u16], u32, f32, f32)> {
    payloads
        .iter()
        .filter_map(|p| match p {
            TensorPayload::Coded { bits, w_min, w_max, codes } => Some((codes.as_slice(), *bits as u32, *w_min, *w_max)),
            TensorPayload::Raw(_) => None,
        })
        .collect()
}

fn write_tensors(out: &mut Vec<u8>, payloads: &[&TensorPayload]) {
    let coded = coded_parts(payloads);
    if coded.is_empty() {
        for p in payloads {
            if let TensorPayload::Raw(v) = p {
                for x in v {
                    out.extend_from_slice(&x.to_be_bytes());
                }
            }
        }
        return;
    }
    for (codes, _, lo, hi) in &coded {
        if !codes.is_empty() {
            out.extend_from_slice(&lo.to_be_bytes());
            out.extend_from_slice(&hi.to_be_bytes());
        }
    }
    let mut w = BitWriter::new(out);
    for (codes, bits, _, _) in &coded {
        for &c in *codes {
            w.push(c, *bits);
        }
    }
    w.finish();
}

fn write_f32s(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend_from_slice(&x.to_be_bytes());
    }
}

pub fn serialize(msg: &MaskedUpdate) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&msg.round.to_be_bytes());
    out.extend_from_slice(&msg.client_id.to_be_bytes());
    out.extend_from_slice(&(msg.layers.len() as u16).to_be_bytes());
    for l in &msg.layers {
        let flag = if l.thresholds.is_some() { 0 } else { NO_THRESHOLDS };
        out.push(l.block.tag() | flag);
        out.push(l.precision.bits());
        out.extend_from_slice(&l.c_in.to_be_bytes());
        out.extend_from_slice(&l.c_out.to_be_bytes());
        write_tensors(&mut out, &[&l.expand, &l.depthwise, &l.project]);
        write_f32s(&mut out, &l.affine);
        if let Some(t) = &l.thresholds {
            write_f32s(&mut out, t);
        }
    }
    let d = &msg.dense;
    out.push(d.precision.bits());
    for v in [d.stem_dims.0, d.stem_dims.1, d.head_dims.0, d.head_dims.1] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    write_tensors(&mut out, &[&d.stem_weight, &d.head_weight]);
    write_f32s(&mut out, &d.stem_bias);
    write_f32s(&mut out, &d.head_bias);
    out
}

/// Bits of a serialized message that the ledger does not count: the header,
/// per-section prefixes, and zero padding after each packed code run.
pub fn overhead_bits(msg: &MaskedUpdate) -> u64 {
    let mut bits = 8 * (HEADER_BYTES + LAYER_PREFIX_BYTES * msg.layers.len() + DENSE_PREFIX_BYTES) as u64;
    let pad = |payloads: &[&TensorPayload]| {
        let coded = coded_parts(payloads);
        let bits = coded.first().map(|c| c.1).unwrap_or(32);
        let n: usize = coded.iter().map(|c| c.0.len()).sum();
        padding_bits(n, bits)
    };
    for l in &msg.layers {
        bits += pad(&[&l.expand, &l.depthwise, &l.project]);
    }
    bits + pad(&[&msg.dense.stem_weight, &msg.dense.head_weight])
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, reason: impl Into<String>) -> Result<T> {
        Err(Error::Decode { offset: self.pos, reason: reason.into() })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return self.fail(format!("truncated while reading {what}"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_be_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_be_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        (0..n).map(|_| self.f32(what)).collect()
    }

    fn codes(&mut self, counts: &[usize], bits: u32) -> Result<Vec<Vec<u16>>> {
        let total: usize = counts.iter().sum();
        let n_bytes = (total * bits as usize).div_ceil(8);
        let bytes = self.take(n_bytes, "packed codes")?;
        let mut acc: u64 = 0;
        let mut n = 0u32;
        let mut it = bytes.iter();
        let mask = (1u64 << bits) - 1;
        let mut out = Vec::with_capacity(counts.len());
        for &count in counts {
            let mut v = Vec::with_capacity(count);
            for _ in 0..count {
                while n < bits {
                    acc = (acc << 8) | *it.next().expect("length checked") as u64;
                    n += 8;
                }
                n -= bits;
                v.push(((acc >> n) & mask) as u16);
            }
            out.push(v);
        }
        Ok(out)
    }

    fn tensors(&mut self, counts: &[usize], precision: Precision) -> Result<Vec<TensorPayload>> {
        match precision {
            Precision::Float32 => counts
                .iter()
                .map(|&n| Ok(TensorPayload::Raw(self.f32s(n, "raw weights")?)))
                .collect(),
            Precision::Quant(q) => {
                let mut bounds = Vec::with_capacity(counts.len());
                for &n in counts {
                    bounds.push(if n > 0 {
                        (self.f32("w_min")?, self.f32("w_max")?)
                    } else {
                        (0.0, 0.0)
                    });
                }
                let codes = self.codes(counts, q.bits() as u32)?;
                Ok(codes
                    .into_iter()
                    .zip(bounds)
                    .map(|(codes, (w_min, w_max))| TensorPayload::Coded { bits: q.bits(), w_min, w_max, codes })
                    .collect())
            }
        }
    }

    fn precision(&mut self) -> Result<Precision> {
        let start = self.pos;
        let b = self.u8("bit width")?;
        Precision::from_bits(b).ok_or_else(|| Error::Decode {
            offset: start,
            reason: format!("unsupported bit width {b}"),
        })
    }
}

pub fn deserialize(buf: &[u8]) -> Result<MaskedUpdate> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Decode { offset: 0, reason: "bad magic".into() });
    }
    let version = r.u8("version")?;
    if version != VERSION {
        return Err(Error::Decode { offset: 4, reason: format!("unsupported version {version}") });
    }
    let round = r.u32("round")?;
    let client_id = r.u16("client id")?;
    let n_layers = r.u16("layer count")? as usize;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let tag_pos = r.pos;
        let tag = r.u8("block tag")?;
        let block = BlockChoice::from_tag(tag & !NO_THRESHOLDS).ok_or_else(|| Error::Decode {
            offset: tag_pos,
            reason: format!("unknown block tag {tag:#04x}"),
        })?;
        let precision = r.precision()?;
        let c_in = r.u16("c_in")?;
        let c_out = r.u16("c_out")?;
        if c_in == 0 || c_out == 0 {
            return r.fail("zero channel count");
        }
        let probe = LayerUpdate {
            c_in,
            c_out,
            block,
            precision,
            expand: TensorPayload::Raw(Vec::new()),
            depthwise: TensorPayload::Raw(Vec::new()),
            project: TensorPayload::Raw(Vec::new()),
            affine: Vec::new(),
            thresholds: None,
        };
        let idx = SelectedIndices::new(&probe.config(), block);
        let mut t = r
            .tensors(&[idx.expand.len(), idx.depthwise.len(), idx.project.len()], precision)?
            .into_iter();
        let affine = r.f32s(idx.affine.len(), "affine")?;
        let thresholds = if tag & NO_THRESHOLDS == 0 {
            let v = r.f32s(5, "thresholds")?;
            Some([v[0], v[1], v[2], v[3], v[4]])
        } else {
            None
        };
        layers.push(LayerUpdate {
            expand: t.next().expect("three tensors"),
            depthwise: t.next().expect("three tensors"),
            project: t.next().expect("three tensors"),
            affine,
            thresholds,
            ..probe
        });
    }
    let precision = r.precision()?;
    let stem_dims = (r.u16("stem dims")?, r.u16("stem dims")?);
    let head_dims = (r.u16("head dims")?, r.u16("head dims")?);
    let stem_n = stem_dims.0 as usize * stem_dims.1 as usize;
    let head_n = head_dims.0 as usize * head_dims.1 as usize;
    let mut t = r.tensors(&[stem_n, head_n], precision)?.into_iter();
    let stem_bias = r.f32s(stem_dims.0 as usize, "stem bias")?;
    let head_bias = r.f32s(head_dims.0 as usize, "head bias")?;
    if r.pos != buf.len() {
        return r.fail(format!("{} trailing bytes", buf.len() - r.pos));
    }
    Ok(MaskedUpdate {
        client_id,
        round,
        layers,
        dense: DenseUpdate {
            precision,
            stem_dims,
            head_dims,
            stem_weight: t.next().expect("two tensors"),
            stem_bias,
            head_weight: t.next().expect("two tensors"),
            head_bias,
        },
    })
}
