//! Synthetic image classes and non-IID client partitioning.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N, C, H, W]`
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::Data(format!("images must be 4-D, got shape {:?}", images.shape())));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Dataset { images, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)`
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn sample_len(&self) -> usize {
        let (c, h, w) = self.image_dims();
        c * h * w
    }

    /// Images and labels at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let (c, h, w) = self.image_dims();
        let m = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * m);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * m..(i + 1) * m]);
        }
        let images = Tensor::new(vec![indices.len(), c, h, w], data).expect("sizes agree");
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (images, labels) = self.batch(indices);
        Dataset { images, labels, num_classes: self.num_classes }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        histogram(&self.labels, self.num_classes)
    }
}

pub fn histogram(labels: &[usize], num_classes: usize) -> Vec<usize> {
    let mut h = vec![0; num_classes];
    for &l in labels {
        h[l] += 1;
    }
    h
}

/// Shannon entropy (nats) of a label histogram.
pub fn label_entropy(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.ln()
        })
        .sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(num_classes: usize, samples_per_class: usize, height: usize, width: usize, seed: u64) -> Self {
        SyntheticSpec { num_classes, samples_per_class, channels: 3, height, width, noise: 0.3, seed }
    }

    /// Noise-free image of class `c`: an oriented stripe pattern plus a Gaussian blob,
    /// each with class-specific colour weights.
    pub fn prototype(&self, c: usize) -> Vec<f64> {
        let k = self.num_classes as f64;
        let (h, w) = (self.height as f64, self.width as f64);
        let u = c as f64 / k;
        let fx = 1.0 + (c % 3) as f64;
        let fy = (c / 3 % 3) as f64;
        let phase = PI * u;
        let (cx, cy) = (0.5 * w + 0.25 * w * (2.0 * PI * u).cos(), 0.5 * h + 0.25 * h * (2.0 * PI * u).sin());
        let s2 = 2.0 * (0.18 * w.min(h)).powi(2);
        let mut out = Vec::with_capacity(self.channels * self.height * self.width);
        for ch in 0..self.channels {
            let v = ch as f64 / self.channels as f64;
            let stripe_gain = 0.6 + 0.4 * (2.0 * PI * (u + v)).sin();
            let blob_gain = 0.9 * (2.0 * PI * (u + v)).cos();
            for y in 0..self.height {
                for x in 0..self.width {
                    let (xf, yf) = (x as f64, y as f64);
                    let stripe = (2.0 * PI * (fx * xf / w + fy * yf / h) + phase).sin();
                    let blob = (-((xf - cx).powi(2) + (yf - cy).powi(2)) / s2).exp();
                    out.push(stripe_gain * stripe + blob_gain * blob);
                }
            }
        }
        out
    }

    pub fn generate(&self) -> Result<Dataset> {
        if self.num_classes == 0 || self.samples_per_class == 0 || self.channels == 0 || self.height == 0 || self.width == 0
        {
            return Err(Error::config("synthetic dataset dimensions must be positive"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config(format!("noise must be a non-negative real, got {}", self.noise)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let protos: Vec<Vec<f64>> = (0..self.num_classes).map(|c| self.prototype(c)).collect();
        let n = self.num_classes * self.samples_per_class;
        let m = self.channels * self.height * self.width;
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut data = Vec::with_capacity(n * m);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % self.num_classes;
            labels.push(c);
            data.extend(protos[c].iter().map(|&p| p + self.noise * normal.sample(&mut rng)));
        }
        let images = Tensor::new(vec![n, self.channels, self.height, self.width], data)?;
        Dataset::new(images, labels, self.num_classes)
    }
}

/// Default synthetic task: 3 colour channels, noise 0.3.
pub fn make_synthetic(num_classes: usize, samples_per_class: usize, h: usize, w: usize, seed: u64) -> Result<Dataset> {
    SyntheticSpec::new(num_classes, samples_per_class, h, w, seed).generate()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartitionSpec {
    pub num_clients: usize,
    pub lda_alpha: f64,
    pub seed: u64,
    /// Draws are rejected until every client holds at least this many samples.
    pub min_samples: usize,
}

impl PartitionSpec {
    pub fn new(num_clients: usize, lda_alpha: f64, seed: u64) -> Self {
        PartitionSpec { num_clients, lda_alpha, seed, min_samples: 1 }
    }
}

const MAX_PARTITION_ATTEMPTS: usize = 10_000;

fn dirichlet(alpha: f64, k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("positive alpha");
    loop {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = draws.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            return draws.into_iter().map(|d| d / sum).collect();
        }
    }
}

/// Dirichlet label-skew split. Per class, client proportions are drawn from
/// `Dir(lda_alpha)`; clients already holding at least `N / K` samples get no more of
/// the current class. Draws repeat until every client holds `min_samples`.
pub fn lda_partition(labels: &[usize], num_classes: usize, spec: &PartitionSpec) -> Result<Vec<Vec<usize>>> {
    let k = spec.num_clients;
    let n = labels.len();
    if k == 0 {
        return Err(Error::config("num_clients must be at least 1"));
    }
    if !(spec.lda_alpha > 0.0 && spec.lda_alpha.is_finite()) {
        return Err(Error::config(format!("lda_alpha must be positive, got {}", spec.lda_alpha)));
    }
    let need = spec.min_samples.max(1);
    if k * need > n {
        return Err(Error::config(format!("{k} clients cannot each get {need} of {n} samples")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let by_class: Vec<Vec<usize>> = (0..num_classes)
        .map(|c| (0..n).filter(|&i| labels[i] == c).collect())
        .collect();
    let cap = n as f64 / k as f64;
    for _ in 0..MAX_PARTITION_ATTEMPTS {
        let mut parts: Vec<Vec<usize>> = vec![Vec::new(); k];
        for idx in &by_class {
            if idx.is_empty() {
                continue;
            }
            let mut idx = idx.clone();
            idx.shuffle(&mut rng);
            let mut p = dirichlet(spec.lda_alpha, k, &mut rng);
            for (pj, part) in p.iter_mut().zip(&parts) {
                if part.len() as f64 >= cap {
                    *pj = 0.0;
                }
            }
            let sum: f64 = p.iter().sum();
            if sum <= 0.0 {
                p = vec![1.0 / k as f64; k];
            } else {
                p.iter_mut().for_each(|v| *v /= sum);
            }
            let mut start = 0;
            let mut cum = 0.0;
            for (j, pj) in p.iter().enumerate() {
                cum += pj;
                let end = if j + 1 == k { idx.len() } else { ((cum * idx.len() as f64) as usize).min(idx.len()) };
                parts[j].extend_from_slice(&idx[start..end.max(start)]);
                start = end.max(start);
            }
        }
        if parts.iter().all(|p| p.len() >= need) {
            for p in &mut parts {
                p.sort_unstable();
            }
            return Ok(parts);
        }
    }
    Err(Error::config(format!(
        "could not give each of {k} clients {need} samples with lda_alpha {}",
        spec.lda_alpha
    )))
}

/// Trims every shard to the smallest shard's size (random subset, order kept).
pub fn equalize(parts: &[Vec<usize>], seed: u64) -> Vec<Vec<usize>> {
    let m = parts.iter().map(Vec::len).min().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    parts
        .iter()
        .map(|p| {
            let mut keep: Vec<usize> = p.clone();
            keep.shuffle(&mut rng);
            keep.truncate(m);
            keep.sort_unstable();
            keep
        })
        .collect()
}

/// Shuffled `(train, holdout)` split with `holdout_frac` of the samples held out
/// (at least one each when there are two or more samples).
pub fn holdout_split(indices: &[usize], holdout_frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut v = indices.to_vec();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = v.len();
    let mut h = (n as f64 * holdout_frac).round() as usize;
    if n >= 2 {
        h = h.clamp(1, n - 1);
    } else {
        h = 0;
    }
    let held = v.split_off(n - h);
    (v, held)
}

/// Flat binary layout (little-endian): `N, C, H, W, num_classes` as u32, then
/// `N*C*H*W` f32 values, then `N` u32 labels.
pub fn write_flat(ds: &Dataset, path: &Path) -> Result<()> {
    let (c, h, w) = ds.image_dims();
    let mut buf = Vec::with_capacity(20 + 4 * (ds.images.len() + ds.len()));
    for v in [ds.len(), c, h, w, ds.num_classes] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for &x in ds.images.data() {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    for &l in &ds.labels {
        buf.extend_from_slice(&(l as u32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    f.write_all(&buf).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_flat(path: &Path) -> Result<Dataset> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let word = |i: usize| -> Result<u32> {
        buf.get(4 * i..4 * i + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| Error::Data(format!("{} is truncated", path.display())))
    };
    let dims: Vec<usize> = (0..5).map(|i| word(i).map(|v| v as usize)).collect::<Result<_>>()?;
    let (n, c, h, w, k) = (dims[0], dims[1], dims[2], dims[3], dims[4]);
    let m = n * c * h * w;
    if buf.len() != 4 * (5 + m + n) {
        return Err(Error::Data(format!(
            "{}: expected {} bytes for {n}x{c}x{h}x{w}, found {}",
            path.display(),
            4 * (5 + m + n),
            buf.len()
        )));
    }
    let values = (0..m).map(|i| f32::from_le_bytes(buf[20 + 4 * i..24 + 4 * i].try_into().expect("4 bytes")) as f64);
    let images = Tensor::new(vec![n, c, h, w], values.collect())?;
    let labels = (0..n).map(|i| word(5 + m + i).map(|v| v as usize)).collect::<Result<_>>()?;
    Dataset::new(images, labels, k)
}
