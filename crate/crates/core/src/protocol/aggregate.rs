use super::message::{
    DecodedUpdate, DenseValues, LayerUpdate, LayerValues, MaskedUpdate, Precision, SelectedIndices,
};
use crate::error::{Error, Result};
use crate::superkernel::{BlockChoice, LayerConfig};

/// Running sums for one flat parameter vector.
struct Accum {
    sum: Vec<f64>,
    count: Vec<u32>,
}

impl Accum {
    fn new(n: usize) -> Self {
        Accum { sum: vec![0.0; n], count: vec![0; n] }
    }

    fn add(&mut self, idx: &[usize], vals: &[f64]) {
        for (&i, &v) in idx.iter().zip(vals) {
            self.sum[i] += v;
            self.count[i] += 1;
        }
    }

    fn mean(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter().map(|&i| self.sum[i] / self.count[i] as f64).collect()
    }
}

fn check_structure(updates: &[DecodedUpdate]) -> Result<()> {
    let first = updates.first().ok_or_else(|| Error::protocol("no updates to aggregate"))?;
    for u in &updates[1..] {
        if u.round != first.round {
            return Err(Error::protocol(format!(
                "client {} sent round {} but client {} sent round {}",
                u.client_id, u.round, first.client_id, first.round
            )));
        }
        if u.layers.len() != first.layers.len() {
            return Err(Error::protocol(format!(
                "client {} sent {} layers, client {} sent {}",
                u.client_id,
                u.layers.len(),
                first.client_id,
                first.layers.len()
            )));
        }
        for (j, ((a, _), (b, _))) in u.layers.iter().zip(&first.layers).enumerate() {
            if (a.c_in, a.c_out) != (b.c_in, b.c_out) {
                return Err(Error::protocol(format!("layer {j} shapes differ between clients")));
            }
        }
        let (da, db) = (&u.dense.0, &first.dense.0);
        if (da.stem_dims, da.head_dims) != (db.stem_dims, db.head_dims) {
            return Err(Error::protocol("dense section shapes differ between clients"));
        }
    }
    Ok(())
}

fn layer_lengths(cfg: &LayerConfig) -> [usize; 4] {
    let cm = cfg.c_max();
    [cm * cfg.c_in, cm * 25, cfg.c_out * cm, 4 * cm + 2 * cfg.c_out]
}

/// Region-overlap aggregation over decoded updates. Each entry of every tensor is
/// averaged over exactly the clients whose block selects it; each client gets back
/// only its own selection, with thresholds echoed unchanged.
pub fn aggregate_decoded(updates: &[DecodedUpdate]) -> Result<Vec<DecodedUpdate>> {
    check_structure(updates)?;
    let n_layers = updates[0].layers.len();
    let mut pulls: Vec<DecodedUpdate> = updates.to_vec();
    for j in 0..n_layers {
        let cfg = updates[0].layers[j].0.config();
        let [ne, nd, np, na] = layer_lengths(&cfg);
        let (mut e, mut d, mut p, mut a) = (Accum::new(ne), Accum::new(nd), Accum::new(np), Accum::new(na));
        let idx: Vec<SelectedIndices> = updates
            .iter()
            .map(|u| SelectedIndices::new(&cfg, u.layers[j].0.block))
            .collect();
        for (u, ix) in updates.iter().zip(&idx) {
            let v = &u.layers[j].0;
            let lens = [v.expand.len(), v.depthwise.len(), v.project.len(), v.affine.len()];
            let want = [ix.expand.len(), ix.depthwise.len(), ix.project.len(), ix.affine.len()];
            if lens != want {
                return Err(Error::protocol(format!(
                    "client {} layer {j}: payload sizes {lens:?} do not match block {} ({want:?})",
                    u.client_id, v.block
                )));
            }
            e.add(&ix.expand, &v.expand);
            d.add(&ix.depthwise, &v.depthwise);
            p.add(&ix.project, &v.project);
            a.add(&ix.affine, &v.affine);
        }
        for (pull, ix) in pulls.iter_mut().zip(&idx) {
            let v = &mut pull.layers[j].0;
            v.expand = e.mean(&ix.expand);
            v.depthwise = d.mean(&ix.depthwise);
            v.project = p.mean(&ix.project);
            v.affine = a.mean(&ix.affine);
        }
    }
    let k = updates.len() as f64;
    let mean = |f: fn(&DenseValues) -> &Vec<f64>| -> Vec<f64> {
        let mut acc = vec![0.0; f(&updates[0].dense.0).len()];
        for u in updates {
            for (s, v) in acc.iter_mut().zip(f(&u.dense.0)) {
                *s += v;
            }
        }
        acc.iter().map(|s| s / k).collect()
    };
    let dense = DenseValues {
        stem_weight: mean(|d| &d.stem_weight),
        stem_bias: mean(|d| &d.stem_bias),
        head_weight: mean(|d| &d.head_weight),
        head_bias: mean(|d| &d.head_bias),
        ..updates[0].dense.0.clone()
    };
    for pull in &mut pulls {
        pull.dense.0 = dense.clone();
    }
    Ok(pulls)
}

/// Aggregation plus masked pull: decodes every upload, aggregates, and re-encodes
/// each client's share at that client's own per-layer precision.
pub fn aggregate(updates: &[MaskedUpdate]) -> Result<Vec<MaskedUpdate>> {
    for u in updates {
        for l in &u.layers {
            l.validate()?;
        }
    }
    let decoded: Vec<DecodedUpdate> = updates.iter().map(MaskedUpdate::decode).collect();
    Ok(aggregate_decoded(&decoded)?.iter().map(DecodedUpdate::encode).collect())
}

/// Masked pulls as changes: each client receives `aggregate - own upload` over its
/// own regions, coded at its own precisions. Installed with
/// [`MaskedUpdate::install_delta`].
pub fn masked_pulls(updates: &[MaskedUpdate]) -> Result<Vec<MaskedUpdate>> {
    for u in updates {
        for l in &u.layers {
            l.validate()?;
        }
    }
    let decoded: Vec<DecodedUpdate> = updates.iter().map(MaskedUpdate::decode).collect();
    let merged = aggregate_decoded(&decoded)?;
    merged.iter().zip(&decoded).map(|(m, own)| Ok(m.minus(own)?.encode())).collect()
}

/// FedAvg over the fixed-architecture baseline: every layer must carry `block`
/// at 32 bits without thresholds.
pub fn fedavg_baseline_round(updates: &[MaskedUpdate], block: BlockChoice) -> Result<Vec<MaskedUpdate>> {
    let ok = |l: &LayerUpdate| l.block == block && l.precision == Precision::Float32 && l.thresholds.is_none();
    for u in updates {
        if !u.layers.iter().all(ok) || u.dense.precision != Precision::Float32 {
            return Err(Error::protocol(format!(
                "client {} did not send a fixed {block} full-precision update",
                u.client_id
            )));
        }
    }
    aggregate(updates)
}

/// Helper for tests and diagnostics: a layer's values with every entry set to `f(i)`.
pub fn layer_values_from_fn(cfg: &LayerConfig, block: BlockChoice, f: impl Fn(usize) -> f64) -> LayerValues {
    let ix = SelectedIndices::new(cfg, block);
    let gen = |v: &[usize]| v.iter().map(|&i| f(i)).collect();
    LayerValues {
        c_in: cfg.c_in,
        c_out: cfg.c_out,
        block,
        expand: gen(&ix.expand),
        depthwise: gen(&ix.depthwise),
        project: gen(&ix.project),
        affine: gen(&ix.affine),
        thresholds: Some([0.0; 5]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Network;
    use crate::protocol::{baseline_upload, DecodedUpdate};
    use crate::superkernel::{BlockMasks, ChannelHalf, KernelRegion, Spatial};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> LayerConfig {
        LayerConfig::new(0, 4, 4, 1).unwrap()
    }

    fn decoded(client: u16, block: BlockChoice, f: impl Fn(usize) -> f64) -> DecodedUpdate {
        let c = cfg();
        let dense = DenseValues {
            stem_dims: (4, 3),
            head_dims: (3, 4),
            stem_weight: vec![client as f64; 12],
            stem_bias: vec![0.0; 4],
            head_weight: vec![1.0; 12],
            head_bias: vec![-(client as f64); 3],
        };
        DecodedUpdate {
            client_id: client,
            round: 0,
            layers: vec![(layer_values_from_fn(&c, block, f), Precision::Float32)],
            dense: (dense, Precision::Float32),
        }
    }

    fn region_of(i: usize, c: &LayerConfig) -> KernelRegion {
        KernelRegion::ALL
            .into_iter()
            .find(|r| BlockMasks::depthwise_region_mask(c, *r)[i])
            .expect("regions partition the kernel")
    }

    #[test]
    fn three_client_overlap() {
        let c = cfg();
        let blocks = [BlockChoice::K3E3, BlockChoice::K3E6, BlockChoice::K5E6];
        let ups: Vec<DecodedUpdate> = blocks
            .iter()
            .enumerate()
            .map(|(k, &b)| decoded(k as u16, b, move |i| (k + 1) as f64 * 100.0 + i as f64))
            .collect();
        let pulls = aggregate_decoded(&ups).unwrap();
        let centre_first = KernelRegion { spatial: Spatial::Center3x3, channels: ChannelHalf::First };
        let centre_second = KernelRegion { spatial: Spatial::Center3x3, channels: ChannelHalf::Second };
        for (k, pull) in pulls.iter().enumerate() {
            let ix = SelectedIndices::new(&c, blocks[k]);
            for (&i, &v) in ix.depthwise.iter().zip(&pull.layers[0].0.depthwise) {
                let r = region_of(i, &c);
                let contributors: Vec<f64> = if r == centre_first {
                    vec![1.0, 2.0, 3.0]
                } else if r == centre_second {
                    vec![2.0, 3.0]
                } else {
                    vec![3.0]
                };
                let want = contributors.iter().map(|m| m * 100.0 + i as f64).sum::<f64>() / contributors.len() as f64;
                assert!((v - want).abs() < 1e-12, "client {k} index {i} region {r:?}");
            }
            assert_eq!(pull.layers[0].0.depthwise.len(), ix.depthwise.len());
            assert_eq!(pull.layers[0].0.thresholds, ups[k].layers[0].0.thresholds);
        }
        assert_eq!(pulls[0].dense.0.stem_weight[0], 1.0);
        assert_eq!(pulls[2].dense.0.head_bias[0], -1.0);
    }

    #[test]
    fn full_masks_reduce_to_fedavg() {
        let ups: Vec<DecodedUpdate> = (0..4u16)
            .map(|k| decoded(k, BlockChoice::K5E6, move |i| ((i * 7 + k as usize * 13) % 17) as f64 * 0.37 - 1.1))
            .collect();
        let pulls = aggregate_decoded(&ups).unwrap();
        let n = ups[0].layers[0].0.depthwise.len();
        for i in 0..n {
            let mean = ups.iter().map(|u| u.layers[0].0.depthwise[i]).sum::<f64>() / 4.0;
            for p in &pulls {
                assert!((p.layers[0].0.depthwise[i] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_client_and_identical_clients_are_identity() {
        let one = decoded(0, BlockChoice::K5E3, |i| i as f64 * 0.5);
        assert_eq!(aggregate_decoded(std::slice::from_ref(&one)).unwrap()[0], one);
        let same = vec![one.clone(), DecodedUpdate { client_id: 1, ..one.clone() }];
        let pulls = aggregate_decoded(&same).unwrap();
        assert_eq!(pulls[0].layers, one.layers);
    }

    #[test]
    fn opposite_weights_cancel() {
        let a = decoded(0, BlockChoice::K3E6, |i| i as f64 + 1.0);
        let b = decoded(1, BlockChoice::K3E6, |i| -(i as f64 + 1.0));
        let pulls = aggregate_decoded(&[a, b]).unwrap();
        assert!(pulls[0].layers[0].0.expand.iter().all(|&v| v == 0.0));
        assert!(pulls[1].layers[0].0.affine.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn structural_errors() {
        assert!(matches!(aggregate_decoded(&[]), Err(Error::Protocol(_))));
        let a = decoded(0, BlockChoice::K3E6, |_| 0.0);
        let mut b = decoded(1, BlockChoice::K3E6, |_| 0.0);
        b.layers.push(b.layers[0].clone());
        assert!(matches!(aggregate_decoded(&[a.clone(), b]), Err(Error::Protocol(_))));
        let c = DecodedUpdate { round: 3, ..a.clone() };
        assert!(matches!(aggregate_decoded(&[a, c]), Err(Error::Protocol(_))));
    }

    #[test]
    fn baseline_rejects_searched_updates() {
        let plan = [cfg()];
        let net = Network::init(&plan, 3, 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let ok = baseline_upload(&net, BlockChoice::K3E6, 0, 0);
        assert!(fedavg_baseline_round(&[ok.clone(), ok.clone()], BlockChoice::K3E6).is_ok());
        let searched = crate::protocol::masked_upload(&net, 1, 0);
        assert!(fedavg_baseline_round(&[ok, searched], BlockChoice::K3E6).is_err());
    }

    fn nets(n: usize, seed: u64) -> Vec<Network> {
        let plan = vec![LayerConfig::new(0, 4, 4, 1).unwrap(), LayerConfig::new(1, 4, 6, 2).unwrap()];
        (0..n)
            .map(|k| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed + k as u64);
                Network::init(&plan, 3, 3, &mut rng).unwrap()
            })
            .collect()
    }

    #[test]
    fn lone_client_delta_pull_changes_nothing() {
        let mut net = nets(1, 40).remove(0);
        let before = net.clone();
        let up = crate::protocol::masked_upload(&net, 0, 0);
        let pulls = masked_pulls(&[up]).unwrap();
        pulls[0].install_delta(&mut net).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn delta_pulls_land_on_the_mean() {
        let mut ns = nets(3, 41);
        let block = BlockChoice::K5E6;
        let ups: Vec<MaskedUpdate> = ns.iter().enumerate().map(|(k, n)| baseline_upload(n, block, k as u16, 0)).collect();
        let decoded: Vec<DecodedUpdate> = ups.iter().map(MaskedUpdate::decode).collect();
        let pulls = masked_pulls(&ups).unwrap();
        for (n, p) in ns.iter_mut().zip(&pulls) {
            p.install_delta(n).unwrap();
        }
        let ix = SelectedIndices::new(&ns[0].layers[1].config, block);
        for (j, &i) in ix.depthwise.iter().enumerate() {
            let mean = decoded.iter().map(|d| d.layers[1].0.depthwise[j]).sum::<f64>() / 3.0;
            for n in &ns {
                assert!((n.layers[1].dw_weight.data()[i] - mean).abs() < 1e-6);
            }
        }
        let mean_bias = decoded.iter().map(|d| d.dense.0.head_bias[0]).sum::<f64>() / 3.0;
        for n in &ns {
            assert!((n.head_bias.data()[0] - mean_bias).abs() < 1e-6);
        }
    }

    #[test]
    fn delta_rejects_block_mismatch() {
        let ns = nets(1, 42);
        let a = baseline_upload(&ns[0], BlockChoice::K5E6, 0, 0).decode();
        let b = baseline_upload(&ns[0], BlockChoice::K3E6, 0, 0).decode();
        assert!(a.minus(&b).is_err());
    }
}

