//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is built, evaluated eagerly, and swept backwards by one owner.
//! Only the operations the searchable layers need are provided: 1x1 and
//! depthwise convolutions, per-channel affine, a handful of pointwise maps,
//! pooling, a dense head and softmax cross-entropy.

mod graph;
mod kernels;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;

/// Central finite difference of a scalar function at every coordinate of `x`.
pub fn finite_difference(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    out
}

/// Elementwise comparison used by the gradient checks: relative error when the
/// analytic value is above `1e-6` in magnitude, absolute error otherwise.
/// Returns the index and both values of the first violation.
pub fn gradient_mismatch(analytic: &Tensor, numeric: &Tensor, rel_tol: f64, abs_tol: f64) -> Option<(usize, f64, f64)> {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .enumerate()
        .find(|(_, (&a, &n))| {
            if a.abs() > 1e-6 {
                (a - n).abs() / a.abs().max(n.abs()) > rel_tol
            } else {
                (a - n).abs() > abs_tol
            }
        })
        .map(|(i, (&a, &n))| (i, a, n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn naive_pointwise(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
        let [n, c, h, wd] = x.shape().try_into().unwrap();
        let co = w.shape()[0];
        let mut out = Tensor::zeros(&[n, co, h, wd]);
        for ni in 0..n {
            for o in 0..co {
                for i in 0..h {
                    for j in 0..wd {
                        let mut acc = b.data()[o];
                        for ci in 0..c {
                            acc += w.data()[o * c + ci] * x.data()[((ni * c + ci) * h + i) * wd + j];
                        }
                        out.data_mut()[((ni * co + o) * h + i) * wd + j] = acc;
                    }
                }
            }
        }
        out
    }

    fn naive_depthwise(x: &Tensor, w: &Tensor, stride: usize) -> Tensor {
        let [n, c, h, wd] = x.shape().try_into().unwrap();
        let k = w.shape()[1];
        let pad = (k as i64 - 1) / 2;
        let ho = h.div_ceil(stride);
        let wo = wd.div_ceil(stride);
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        for ni in 0..n {
            for ci in 0..c {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = 0.0;
                        for a in 0..k {
                            for b in 0..k {
                                let ii = (i * stride) as i64 + a as i64 - pad;
                                let jj = (j * stride) as i64 + b as i64 - pad;
                                if ii < 0 || jj < 0 || ii >= h as i64 || jj >= wd as i64 {
                                    continue;
                                }
                                acc += w.data()[(ci * k + a) * k + b]
                                    * x.data()[((ni * c + ci) * h + ii as usize) * wd + jj as usize];
                            }
                        }
                        out.data_mut()[((ni * c + ci) * ho + i) * wo + j] = acc;
                    }
                }
            }
        }
        out
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        assert_eq!(a.shape(), b.shape());
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn pointwise_zero_input_gives_bias() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 2, 2]));
        let w = g.constant(Tensor::full(&[2, 3, 1, 1], 0.7));
        let b = g.constant(Tensor::from_vec(vec![1.5, -2.0]));
        let y = g.conv2d_pointwise(x, w, Some(b)).unwrap();
        let out = g.value(y);
        assert!(out.data()[..4].iter().all(|&v| v == 1.5));
        assert!(out.data()[4..].iter().all(|&v| v == -2.0));
    }

    #[test]
    fn pointwise_identity_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xt = random(&[2, 3, 2, 3], &mut rng);
        let mut g = Graph::new();
        let x = g.constant(xt.clone());
        let w = g.constant(Tensor::from_fn(&[3, 3, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 }));
        let y = g.conv2d_pointwise(x, w, None).unwrap();
        assert_eq!(g.value(y), &xt);
    }

    #[test]
    fn pointwise_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xt = random(&[1, 2, 2, 2], &mut rng);
        let wt = random(&[3, 2, 1, 1], &mut rng);
        let bt = random(&[3], &mut rng);
        let mut g = Graph::new();
        let (x, w, b) = (g.constant(xt.clone()), g.constant(wt.clone()), g.constant(bt.clone()));
        let y = g.conv2d_pointwise(x, w, Some(b)).unwrap();
        assert!(max_abs_diff(g.value(y), &naive_pointwise(&xt, &wt, &bt)) <= 1e-12);
    }

    #[test]
    fn pointwise_channel_mismatch_names_axis() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 2, 2]));
        let w = g.constant(Tensor::zeros(&[2, 4, 1, 1]));
        match g.conv2d_pointwise(x, w, None) {
            Err(Error::Dimension { axis, expected, actual, .. }) => {
                assert_eq!(axis, "input channels");
                assert_eq!((expected, actual), (4, 3));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn depthwise_delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xt = random(&[1, 2, 4, 4], &mut rng);
        for k in [3usize, 5] {
            let mut g = Graph::new();
            let x = g.constant(xt.clone());
            let centre = (k / 2) * k + k / 2;
            let w = g.constant(Tensor::from_fn(&[2, k, k], |i| if i % (k * k) == centre { 1.0 } else { 0.0 }));
            let y = g.conv2d_depthwise(x, w, 1).unwrap();
            assert_eq!(g.value(y), &xt);
        }
    }

    #[test]
    fn depthwise_counts_overlap() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = g.constant(Tensor::full(&[1, 3, 3], 1.0));
        let y = g.conv2d_depthwise(x, w, 1).unwrap();
        assert_eq!(g.value(y).data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn depthwise_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (shape, k, stride) in [([1, 2, 5, 5], 5, 2), ([2, 3, 4, 6], 3, 1), ([1, 2, 6, 4], 5, 1), ([1, 1, 2, 2], 5, 2)] {
            let xt = random(&shape, &mut rng);
            let wt = random(&[shape[1], k, k], &mut rng);
            let mut g = Graph::new();
            let (x, w) = (g.constant(xt.clone()), g.constant(wt.clone()));
            let y = g.conv2d_depthwise(x, w, stride).unwrap();
            assert!(max_abs_diff(g.value(y), &naive_depthwise(&xt, &wt, stride)) <= 1e-12);
        }
    }

    #[test]
    fn depthwise_rejects_even_kernel() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 4, 4]));
        let w = g.constant(Tensor::zeros(&[1, 4, 4]));
        assert!(matches!(g.conv2d_depthwise(x, w, 1), Err(Error::Config(_))));
    }

    #[test]
    fn affine_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xt = random(&[2, 3, 2, 2], &mut rng);
        let mut g = Graph::new();
        let x = g.constant(xt.clone());
        let one = g.constant(Tensor::full(&[3], 1.0));
        let zero = g.constant(Tensor::zeros(&[3]));
        let five = g.constant(Tensor::full(&[3], 5.0));
        let id = g.affine_channel(x, one, zero).unwrap();
        assert_eq!(g.value(id), &xt);
        let c = g.affine_channel(x, zero, five).unwrap();
        assert!(g.value(c).data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn affine_scale_gradient_is_channel_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let xt = random(&[2, 3, 2, 2], &mut rng);
        let st = random(&[3], &mut rng);
        let tt = random(&[3], &mut rng);
        let f = |s: &Tensor| {
            let mut g = Graph::new();
            let x = g.constant(xt.clone());
            let s = g.constant(s.clone());
            let t = g.constant(tt.clone());
            let y = g.affine_channel(x, s, t).unwrap();
            let l = g.sum(y);
            g.value(l).item()
        };
        let numeric = finite_difference(&st, 1e-5, f);
        let mut g = Graph::new();
        let x = g.constant(xt.clone());
        let s = g.param(st.clone());
        let t = g.constant(tt.clone());
        let y = g.affine_channel(x, s, t).unwrap();
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        let analytic = grads.get(s).unwrap();
        assert!(gradient_mismatch(analytic, &numeric, 1e-6, 1e-6).is_none());
        // closed form: sum over (n, h, w)
        for c in 0..3 {
            let expected: f64 = (0..2).map(|n| xt.data()[(n * 3 + c) * 4..(n * 3 + c + 1) * 4].iter().sum::<f64>()).sum();
            assert!((analytic.data()[c] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn elementwise_values() {
        let mut g = Graph::new();
        let z = g.scalar(0.0);
        let s = g.sigmoid(z);
        assert_eq!(g.value(s).item(), 0.5);
        let a = g.constant(Tensor::from_vec(vec![7.0, -1.0, 3.0]));
        let r = g.relu6(a);
        assert_eq!(g.value(r).data(), &[6.0, 0.0, 3.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(0.0));
        let s = g.sigmoid(x);
        let grads = g.backward(s).unwrap();
        let analytic = grads.get(x).unwrap().item();
        assert_eq!(analytic, 0.25);
        let numeric = finite_difference(&Tensor::scalar(0.0), 1e-5, |t| {
            let mut g = Graph::new();
            let x = g.constant(t.clone());
            let s = g.sigmoid(x);
            g.value(s).item()
        });
        assert!((numeric.item() - 0.25).abs() <= 1e-6);
    }

    #[test]
    fn squared_l2_values_and_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![0.3, 0.4]));
        let n = g.squared_l2(x);
        assert!((g.value(n).item() - 0.25).abs() < 1e-15);
        let grads = g.backward(n).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.6, 0.8]);

        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[4]));
        let n = g.squared_l2(z);
        assert_eq!(g.value(n).item(), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xt = random(&[3, 4], &mut rng);
        let numeric = finite_difference(&xt, 1e-5, |t| t.squared_l2());
        let mut g = Graph::new();
        let x = g.param(xt.clone());
        let n = g.squared_l2(x);
        let grads = g.backward(n).unwrap();
        assert!(gradient_mismatch(grads.get(x).unwrap(), &numeric, 1e-6, 1e-6).is_none());
    }

    #[test]
    fn cross_entropy_cases() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[2, 5]));
        let ce = g.softmax_cross_entropy(z, &[0, 3]).unwrap();
        assert!((g.value(ce).item() - 5f64.ln()).abs() < 1e-12);

        let z = g.constant(Tensor::new(vec![1, 3], vec![-1e3, 1e3, -1e3]).unwrap());
        let ce = g.softmax_cross_entropy(z, &[1]).unwrap();
        assert!(g.value(ce).item() < 1e-12);

        let z = g.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(g.softmax_cross_entropy(z, &[3]), Err(Error::Data(_))));
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let zt = random(&[4, 3], &mut rng).map(|v| 3.0 * v);
        let labels = [0usize, 2, 1, 2];
        let numeric = finite_difference(&zt, 1e-5, |t| {
            let mut g = Graph::new();
            let z = g.constant(t.clone());
            let ce = g.softmax_cross_entropy(z, &labels).unwrap();
            g.value(ce).item()
        });
        let mut g = Graph::new();
        let z = g.param(zt.clone());
        let ce = g.softmax_cross_entropy(z, &labels).unwrap();
        let grads = g.backward(ce).unwrap();
        assert!(gradient_mismatch(grads.get(z).unwrap(), &numeric, 1e-5, 1e-6).is_none());
    }

    #[test]
    fn backward_simple_cases() {
        let wt = Tensor::from_vec(vec![0.5, -1.5, 2.0]);
        let mut g = Graph::new();
        let w = g.param(wt.clone());
        let s = g.sum(w);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let w = g.param(wt.clone());
        let n = g.squared_l2(w);
        let grads = g.backward(n).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, -3.0, 4.0]);
    }

    #[test]
    fn reused_parameter_accumulates() {
        let mut g = Graph::new();
        let w = g.param(Tensor::scalar(1.25));
        let two_w = g.add(w, w).unwrap();
        let grads = g.backward(two_w).unwrap();
        assert_eq!(grads.get(w).unwrap().item(), 2.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let w = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(w), Err(Error::Usage(_))));
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut g = Graph::new();
            let x = g.constant(random(&[2, 3, 5, 5], &mut rng));
            let w = g.param(random(&[3, 5, 5], &mut rng));
            let y = g.conv2d_depthwise(x, w, 2).unwrap();
            let y = g.relu6(y);
            let p = g.global_avg_pool(y).unwrap();
            let hw = g.param(random(&[4, 3], &mut rng));
            let hb = g.param(random(&[4], &mut rng));
            let z = g.dense(p, hw, hb).unwrap();
            g.value(z).clone()
        };
        assert_eq!(run(), run());
    }
}
