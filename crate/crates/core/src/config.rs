//! Flat `key = value` run configuration with optional `[client.N]` sections.
//!
//! ```text
//! rounds = 30
//! layers = 8:8:1, 8:16:2, 16:16:1
//! pareto = 1.0, 0.0, 0.0
//!
//! [client.0]
//! alpha = 0.5
//! beta = 0.5
//! gamma = 0.0
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::hwproxy::ParetoCoefficients;
use crate::superkernel::LayerConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub rounds: u32,
    pub local_epochs: usize,
    pub finetune_epochs: usize,
    pub clients: Vec<ParetoCoefficients>,
    pub lr_w: f64,
    pub lr_t: f64,
    pub batch_size: usize,
    /// `(C_in, C_out, stride)` per searchable layer.
    pub layers: Vec<(usize, usize, usize)>,
    pub seed: u64,
    pub cost_table: Option<PathBuf>,
    pub image_size: usize,
    pub image_channels: usize,
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub noise: f64,
    pub lda_alpha: f64,
    pub holdout_fraction: f64,
    /// Optional flat binary dataset replacing the synthetic one.
    pub dataset: Option<PathBuf>,
    pub parallel: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            rounds: 30,
            local_epochs: 1,
            finetune_epochs: 5,
            clients: vec![ParetoCoefficients { alpha: 1.0, beta: 0.0, gamma: 0.0 }; 8],
            lr_w: 0.05,
            lr_t: 2.0,
            batch_size: 16,
            layers: vec![(8, 8, 1), (8, 8, 1), (8, 16, 2), (16, 16, 1), (16, 24, 2), (24, 24, 1)],
            seed: 1,
            cost_table: None,
            image_size: 16,
            image_channels: 3,
            num_classes: 3,
            samples_per_class: 200,
            noise: 0.3,
            lda_alpha: 0.2,
            holdout_fraction: 0.1,
            dataset: None,
            parallel: true,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("line {line}: `{key}` expects a number, got `{value}`")))
}

fn parse_layers(value: &str, line: usize) -> Result<Vec<(usize, usize, usize)>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|item| {
            let parts: Vec<&str> = item.split(':').map(str::trim).collect();
            if parts.len() != 3 {
                return Err(Error::config(format!(
                    "line {line}: `layers` entries are C_in:C_out:stride, got `{item}`"
                )));
            }
            Ok((
                parse_num("layers", parts[0], line)?,
                parse_num("layers", parts[1], line)?,
                parse_num("layers", parts[2], line)?,
            ))
        })
        .collect()
}

fn parse_triple(key: &str, value: &str, line: usize) -> Result<(f64, f64, f64)> {
    let v: Vec<f64> = value
        .split(',')
        .map(|s| parse_num(key, s.trim(), line))
        .collect::<Result<_>>()?;
    match v[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(Error::config(format!("line {line}: `{key}` expects three comma-separated numbers"))),
    }
}

fn parse_bool(key: &str, value: &str, line: usize) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::config(format!("line {line}: `{key}` expects true or false, got `{value}`"))),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut n_clients: Option<usize> = None;
        let mut default_coeff = (1.0, 0.0, 0.0);
        let mut per_client: BTreeMap<usize, [Option<f64>; 3]> = BTreeMap::new();
        let mut section: Option<usize> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let s = raw.split('#').next().unwrap_or("").trim();
            if s.is_empty() {
                continue;
            }
            if let Some(head) = s.strip_prefix('[') {
                let name = head
                    .strip_suffix(']')
                    .ok_or_else(|| Error::config(format!("line {line}: unterminated section header")))?;
                let id = name
                    .strip_prefix("client.")
                    .and_then(|n| n.trim().parse::<usize>().ok())
                    .ok_or_else(|| Error::config(format!("line {line}: unknown section `[{name}]`")))?;
                per_client.entry(id).or_insert([None; 3]);
                section = Some(id);
                continue;
            }
            let (key, value) = s
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::config(format!("line {line}: expected `key = value`")))?;
            if let Some(id) = section {
                let slot = match key {
                    "alpha" => 0,
                    "beta" => 1,
                    "gamma" => 2,
                    _ => return Err(Error::config(format!("line {line}: unknown client key `{key}`"))),
                };
                per_client.get_mut(&id).expect("section registered")[slot] = Some(parse_num(key, value, line)?);
                continue;
            }
            match key {
                "rounds" => cfg.rounds = parse_num(key, value, line)?,
                "local_epochs" => cfg.local_epochs = parse_num(key, value, line)?,
                "finetune_epochs" => cfg.finetune_epochs = parse_num(key, value, line)?,
                "clients" => n_clients = Some(parse_num(key, value, line)?),
                "lr_w" => cfg.lr_w = parse_num(key, value, line)?,
                "lr_t" => cfg.lr_t = parse_num(key, value, line)?,
                "batch_size" => cfg.batch_size = parse_num(key, value, line)?,
                "layers" => cfg.layers = parse_layers(value, line)?,
                "seed" => cfg.seed = parse_num(key, value, line)?,
                "cost_table" => cfg.cost_table = Some(PathBuf::from(value)),
                "image_size" => cfg.image_size = parse_num(key, value, line)?,
                "image_channels" => cfg.image_channels = parse_num(key, value, line)?,
                "num_classes" => cfg.num_classes = parse_num(key, value, line)?,
                "samples_per_class" => cfg.samples_per_class = parse_num(key, value, line)?,
                "noise" => cfg.noise = parse_num(key, value, line)?,
                "lda_alpha" => cfg.lda_alpha = parse_num(key, value, line)?,
                "holdout_fraction" => cfg.holdout_fraction = parse_num(key, value, line)?,
                "dataset" => cfg.dataset = Some(PathBuf::from(value)),
                "parallel" => cfg.parallel = parse_bool(key, value, line)?,
                "pareto" => default_coeff = parse_triple(key, value, line)?,
                _ => return Err(Error::config(format!("line {line}: unknown key `{key}`"))),
            }
        }
        let highest = per_client.keys().next_back().map(|&k| k + 1).unwrap_or(0);
        let k = n_clients.unwrap_or(highest.max(cfg.clients.len()));
        if highest > k {
            return Err(Error::config(format!("section [client.{}] but only {k} clients", highest - 1)));
        }
        cfg.clients = (0..k)
            .map(|c| {
                let o = per_client.get(&c).copied().unwrap_or([None; 3]);
                ParetoCoefficients {
                    alpha: o[0].unwrap_or(default_coeff.0),
                    beta: o[1].unwrap_or(default_coeff.1),
                    gamma: o[2].unwrap_or(default_coeff.2),
                }
            })
            .collect();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text)
    }

    pub fn layer_plan(&self) -> Result<Vec<LayerConfig>> {
        self.layers
            .iter()
            .enumerate()
            .map(|(i, &(ci, co, s))| LayerConfig::new(i, ci, co, s))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("clients", self.clients.len()),
            ("batch_size", self.batch_size),
            ("image_size", self.image_size),
            ("image_channels", self.image_channels),
            ("num_classes", self.num_classes),
            ("samples_per_class", self.samples_per_class),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("`{name}` must be at least 1")));
            }
        }
        for (name, v) in [("lr_w", self.lr_w), ("lr_t", self.lr_t), ("lda_alpha", self.lda_alpha)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("`{name}` must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::config(format!(
                "`holdout_fraction` must be in [0, 1), got {}",
                self.holdout_fraction
            )));
        }
        if self.layers.is_empty() {
            return Err(Error::config("`layers` needs at least one searchable layer"));
        }
        if self.clients.len() > u16::MAX as usize {
            return Err(Error::config("too many clients"));
        }
        let plan = self.layer_plan()?;
        for w in plan.windows(2) {
            if w[0].c_out != w[1].c_in {
                return Err(Error::config(format!(
                    "`layers`: layer {} outputs {} channels but layer {} takes {}",
                    w[0].index, w[0].c_out, w[1].index, w[1].c_in
                )));
            }
        }
        for (i, c) in self.clients.iter().enumerate() {
            c.validate().map_err(|e| Error::config(format!("client {i}: {e}")))?;
        }
        Ok(())
    }

    /// Renders the configuration back into the text format.
    pub fn to_text(&self) -> String {
        let layers: Vec<String> = self.layers.iter().map(|(a, b, c)| format!("{a}:{b}:{c}")).collect();
        let mut s = format!(
            "rounds = {}\nlocal_epochs = {}\nfinetune_epochs = {}\nclients = {}\nlr_w = {}\nlr_t = {}\n\
             batch_size = {}\nlayers = {}\nseed = {}\nimage_size = {}\nimage_channels = {}\nnum_classes = {}\n\
             samples_per_class = {}\nnoise = {}\nlda_alpha = {}\nholdout_fraction = {}\nparallel = {}\n",
            self.rounds,
            self.local_epochs,
            self.finetune_epochs,
            self.clients.len(),
            self.lr_w,
            self.lr_t,
            self.batch_size,
            layers.join(", "),
            self.seed,
            self.image_size,
            self.image_channels,
            self.num_classes,
            self.samples_per_class,
            self.noise,
            self.lda_alpha,
            self.holdout_fraction,
            self.parallel,
        );
        if let Some(p) = &self.cost_table {
            s.push_str(&format!("cost_table = {}\n", p.display()));
        }
        if let Some(p) = &self.dataset {
            s.push_str(&format!("dataset = {}\n", p.display()));
        }
        for (i, c) in self.clients.iter().enumerate() {
            s.push_str(&format!("\n[client.{i}]\nalpha = {}\nbeta = {}\ngamma = {}\n", c.alpha, c.beta, c.gamma));
        }
        s
    }
}
