use faqs::autodiff::{Graph, Tensor, Var};
use faqs::config::RunConfig;
use faqs::data;
use faqs::engine::{Federation, Method};
use faqs::hwproxy::{self, ParetoCoefficients};
use faqs::model::{NetMode, Network};
use faqs::superkernel::{BlockChoice, LayerConfig, KERNEL};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config(clients: usize, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.rounds = 6;
    cfg.finetune_epochs = 3;
    cfg.layers = vec![(8, 8, 1), (8, 16, 2), (16, 16, 1)];
    cfg.image_size = 8;
    cfg.samples_per_class = 60;
    cfg.lr_t = 0.3;
    cfg.lda_alpha = 0.5;
    cfg.clients = vec![ParetoCoefficients::new(1.0, 0.0, 0.0).unwrap(); clients];
    cfg
}

/// Plain MBConv network with a real 3x3 depthwise kernel. Parameters are kept in
/// one list: stem weight and bias, nine tensors per layer, head weight and bias.
struct Plain {
    params: Vec<Tensor>,
    layers: Vec<(bool, usize)>,
}

fn plain_from(net: &Network) -> Plain {
    let mut params = vec![net.stem_weight.clone(), net.stem_bias.clone()];
    let mut layers = Vec::new();
    for l in &net.layers {
        let cm = l.config.c_max();
        let dw = Tensor::from_fn(&[cm, 3, 3], |i| {
            let (c, r, s) = (i / 9, (i % 9) / 3, i % 3);
            l.dw_weight.data()[c * KERNEL * KERNEL + (r + 1) * KERNEL + s + 1]
        });
        params.extend([
            l.expand_weight.clone(),
            l.expand_affine.scale.clone(),
            l.expand_affine.shift.clone(),
            dw,
            l.dw_affine.scale.clone(),
            l.dw_affine.shift.clone(),
            l.project_weight.clone(),
            l.project_affine.scale.clone(),
            l.project_affine.shift.clone(),
        ]);
        layers.push((l.config.allows_skip(), l.config.stride));
    }
    params.extend([net.head_weight.clone(), net.head_bias.clone()]);
    Plain { params, layers }
}

fn plain_step(p: &mut Plain, x: &Tensor, labels: &[usize], lr: f64) -> f64 {
    let mut g = Graph::new();
    let v: Vec<Var> = p.params.iter().map(|t| g.param(t.clone())).collect();
    let xv = g.constant(x.clone());
    let h = g.conv2d_pointwise(xv, v[0], Some(v[1])).unwrap();
    let mut h = g.relu6(h);
    for (k, &(residual, stride)) in p.layers.iter().enumerate() {
        let w = &v[2 + 9 * k..2 + 9 * (k + 1)];
        let y = g.conv2d_pointwise(h, w[0], None).unwrap();
        let y = g.affine_channel(y, w[1], w[2]).unwrap();
        let y = g.relu6(y);
        let y = g.conv2d_depthwise(y, w[3], stride).unwrap();
        let y = g.affine_channel(y, w[4], w[5]).unwrap();
        let y = g.relu6(y);
        let y = g.conv2d_pointwise(y, w[6], None).unwrap();
        let y = g.affine_channel(y, w[7], w[8]).unwrap();
        h = if residual { g.add(h, y).unwrap() } else { y };
    }
    let n = v.len();
    let pooled = g.global_avg_pool(h).unwrap();
    let logits = g.dense(pooled, v[n - 2], v[n - 1]).unwrap();
    let loss = g.softmax_cross_entropy(logits, labels).unwrap();
    let value = g.value(loss).item();
    let grads = g.backward(loss).unwrap();
    for (t, var) in p.params.iter_mut().zip(&v) {
        if let Some(gr) = grads.get(*var) {
            t.sgd_step(gr, lr);
        }
    }
    value
}

#[test]
fn frozen_k3e6_float_training_is_plain_mbconv_training() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let plan = [LayerConfig::new(0, 3, 3, 1).unwrap(), LayerConfig::new(1, 3, 4, 2).unwrap()];
    let mut net = Network::init(&plan, 2, 3, &mut rng).unwrap();
    let mut plain = plain_from(&net);
    let x = Tensor::from_fn(&[4, 2, 6, 6], |_| rng.random_range(-1.0..1.0));
    let labels = vec![0, 1, 2, 1];
    let mode = NetMode::Fixed { blocks: vec![BlockChoice::K3E6; 2], quant: None };
    let coeff = ParetoCoefficients::new(1.0, 0.0, 0.0).unwrap();
    let table = hwproxy::CostTable::synthetic(&plan, (6, 6));
    let norms = table.normalizers(&plan).unwrap();
    for step in 0..15 {
        let mut g = Graph::new();
        let v = net.register(&mut g);
        let xv = g.constant(x.clone());
        let f = net.forward(&mut g, &v, xv, &mode).unwrap();
        let ce = g.softmax_cross_entropy(f.logits, &labels).unwrap();
        let lat = hwproxy::expected_latency(&mut g, &f.gates, &table).unwrap();
        let ms = hwproxy::expected_model_size(&mut g, &f.gates, &table).unwrap();
        let loss = hwproxy::pareto_loss(&mut g, ce, lat, ms, &coeff, norms).unwrap();
        let ours = g.value(loss).item();
        let grads = g.backward(loss).unwrap();
        net.apply_gradients(&v, &grads, 0.1, 0.5);
        let reference = plain_step(&mut plain, &x, &labels, 0.1);
        assert!((ours - reference).abs() < 1e-8, "step {step}: {ours} vs {reference}");
    }
}

fn shard_loss(fed: &Federation, client: usize) -> f64 {
    let c = &fed.clients[client];
    let (x, labels) = fed.data.batch(&c.train);
    let mut g = Graph::new();
    let v = c.net.register(&mut g);
    let xv = g.constant(x);
    let f = c.net.forward(&mut g, &v, xv, &NetMode::Search).unwrap();
    let ce = g.softmax_cross_entropy(f.logits, &labels).unwrap();
    g.value(ce).item()
}

#[test]
fn two_local_epochs_lower_the_loss() {
    let mut improved = 0;
    for seed in 0..20 {
        let mut cfg = small_config(1, 500 + seed);
        cfg.local_epochs = 2;
        cfg.rounds = 1;
        let mut fed = Federation::new(&cfg, Method::Faqs).unwrap();
        let before = shard_loss(&fed, 0);
        fed.run_round().unwrap();
        let after = shard_loss(&fed, 0);
        improved += (after < before) as usize;
    }
    assert!(improved >= 19, "loss fell in only {improved} of 20 runs");
}

#[test]
fn skip_only_model_trains_and_reports() {
    let mut cfg = small_config(2, 9);
    cfg.layers = vec![(8, 8, 1), (8, 8, 1)];
    cfg.rounds = 2;
    let mut fed = Federation::new(&cfg, Method::FedAvg { block: BlockChoice::Skip }).unwrap();
    fed.run().unwrap();
    for m in fed.finetune().unwrap() {
        assert!(m.blocks.iter().all(|b| b.is_skip()));
        assert!(m.accuracy.is_finite());
        assert_eq!(m.latency_ms, 0.0);
    }
}

#[test]
fn finetune_keeps_search_accuracy() {
    let mut gaps = Vec::new();
    for seed in 0..20 {
        let mut fed = Federation::new(&small_config(3, 700 + seed), Method::Faqs).unwrap();
        fed.run().unwrap();
        for m in fed.finetune().unwrap() {
            gaps.push(m.accuracy - m.search_accuracy);
        }
    }
    gaps.sort_by(f64::total_cmp);
    let median = gaps[gaps.len() / 2];
    assert!(median >= -0.05, "median finetune gain {median}");
}

#[test]
fn partitions_feed_every_client() {
    let cfg = small_config(4, 11);
    let fed = Federation::new(&cfg, Method::Faqs).unwrap();
    let sizes: Vec<usize> = fed.clients.iter().map(|c| c.train.len() + c.holdout.len()).collect();
    assert!(sizes.iter().all(|&s| s == sizes[0] && s > 0));
    let mut all: Vec<usize> = fed.clients.iter().flat_map(|c| c.train.iter().chain(&c.holdout).copied()).collect();
    all.sort_unstable();
    all.dedup();
    assert_eq!(all.len(), sizes.iter().sum::<usize>());
    let h = data::histogram(&fed.data.labels, fed.data.num_classes);
    assert!(h.iter().all(|&c| c == cfg.samples_per_class));
}
