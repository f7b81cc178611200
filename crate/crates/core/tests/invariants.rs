mod common;

use camp_core::curvature::{
    hvp_fd, power_iteration_on, significance_from_vector, FiniteDifferenceHvp, Quadratic,
};
use camp_core::flops::ledger;
use camp_core::probe::{activation_stats, mad, AccuracyReport, Accuracy};
use camp_core::prune::{
    cyclic_pairing, magnitude_significance, merge_cyclic, partition, percentile_threshold, prune_with_significance,
    Partition, Strategy,
};
use camp_core::{Layer, Network, Tensor};
use common::random_batch;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn strategy() -> impl proptest::strategy::Strategy<Value = Strategy> {
    prop::sample::select(Strategy::ALL.to_vec())
}

fn mlp(input: usize, hidden: usize, classes: usize, seed: u64) -> Network<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Network::mlp(vec![input], &[hidden], classes, &mut rng).unwrap()
}

fn random_vec(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn percentile_is_nearest_rank(sigma in prop::collection::vec(0.0f64..10.0, 1..200), p in 0.0f64..=100.0) {
        let theta = percentile_threshold(&sigma, p).unwrap();
        let n = sigma.len();
        let r = ((p / 100.0 * n as f64).ceil() as usize).clamp(1, n);
        let below = sigma.iter().filter(|&&s| s < theta).count();
        let at_most = sigma.iter().filter(|&&s| s <= theta).count();
        prop_assert!(sigma.contains(&theta));
        prop_assert!(below < r && r <= at_most, "r {} below {} at_most {}", r, below, at_most);
    }

    #[test]
    fn partition_covers_and_orders(sigma in prop::collection::vec(0.0f64..1.0, 1..300), p in 0.0f64..=100.0) {
        let theta = percentile_threshold(&sigma, p).unwrap();
        let part = partition(&sigma, theta);
        let mut all: Vec<usize> = part.significant.iter().chain(&part.less).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..sigma.len()).collect::<Vec<_>>());
        prop_assert!(part.significant.iter().all(|&i| sigma[i] >= theta));
        prop_assert!(part.less.iter().all(|&i| sigma[i] < theta));
        prop_assert!(part.significant.windows(2).all(|w| sigma[w[0]] > sigma[w[1]] || (sigma[w[0]] == sigma[w[1]] && w[0] < w[1])));
        prop_assert!(part.less.windows(2).all(|w| sigma[w[0]] < sigma[w[1]] || (sigma[w[0]] == sigma[w[1]] && w[0] < w[1])));
        prop_assert!(!part.significant.is_empty());
    }

    #[test]
    fn merge_conserves_layer_sum(w in prop::collection::vec(-1.0f64..1.0, 1..400), seed in any::<u64>(), p in 0.0f64..=100.0) {
        let sigma: Vec<f64> = random_vec(w.len(), seed).iter().map(|x| x.abs()).collect();
        let part = partition(&sigma, percentile_threshold(&sigma, p).unwrap());
        let mut merged = w.clone();
        let pairing = merge_cyclic(&mut merged, &part).unwrap();
        let before: f64 = w.iter().sum();
        let after: f64 = merged.iter().sum();
        prop_assert!((before - after).abs() <= 1e-6);
        prop_assert!(part.less.iter().all(|&i| merged[i] == 0.0));
        prop_assert_eq!(pairing.pairs.len(), part.less.len());
    }

    #[test]
    fn cyclic_in_degrees_are_balanced(s in 1usize..300, l in 0usize..600) {
        let part = Partition { theta: 0.0, significant: (0..s).collect(), less: (s..s + l).collect() };
        let deg = cyclic_pairing(&part).unwrap().in_degrees(s);
        let (lo, hi) = (*deg.iter().min().unwrap(), *deg.iter().max().unwrap());
        prop_assert!(hi - lo <= 1);
        if l >= s {
            prop_assert!(lo == l / s && hi == l.div_ceil(s));
        }
    }

    #[test]
    fn pruned_weights_match_mask_and_target(
        s in strategy(),
        p in 0.0f64..=100.0,
        hidden in 1usize..20,
        seed in any::<u64>(),
    ) {
        let net = mlp(5, hidden, 3, seed);
        let sig = if s.uses_curvature() {
            significance_from_vector(&random_vec(net.weight_count(), seed ^ 1), &net).unwrap()
        } else {
            magnitude_significance(&net)
        };
        let out = prune_with_significance(&net, s, p, &sig, seed).unwrap();
        let w = out.network.weights_flat();
        for (keep, x) in out.mask.keep.iter().zip(&w) {
            if !keep {
                prop_assert_eq!(*x, 0.0);
            }
        }
        for row in &out.report.layers {
            prop_assert!((row.sparsity - p / 100.0).abs() <= 1.0 / row.n_k as f64 + 1e-12);
            prop_assert_eq!(row.s + row.l, row.n_k);
        }
        prop_assert!(out.network.layers().iter().zip(net.layers()).all(|(a, b)| a.bias() == b.bias()));
        let mut again = out.network.clone();
        out.mask.apply(&mut again).unwrap();
        prop_assert_eq!(again, out.network);
    }

    #[test]
    fn reduction_is_additive_and_monotone(hidden in 1usize..40, seed in any::<u64>(), p1 in 0.0f64..=100.0, p2 in 0.0f64..=100.0) {
        let net = mlp(7, hidden, 4, seed);
        let sig = magnitude_significance(&net);
        let (lo, hi) = if p1 <= p2 { (p1, p2) } else { (p2, p1) };
        let a = prune_with_significance(&net, Strategy::Magnitude, lo, &sig, 0).unwrap();
        let b = prune_with_significance(&net, Strategy::Magnitude, hi, &sig, 0).unwrap();
        let la = ledger(&a.network, Some(&a.mask)).unwrap();
        let lb = ledger(&b.network, Some(&b.mask)).unwrap();
        prop_assert_eq!(la.total_dense, la.layers.iter().map(|r| r.dense_flops).sum::<u64>());
        prop_assert!((la.total_effective - la.layers.iter().map(|r| r.effective_flops).sum::<f64>()).abs() < 1e-9);
        prop_assert!(lb.reduction_pct >= la.reduction_pct);
    }

    #[test]
    fn rayleigh_is_monotone_on_psd_quadratics(n in 1usize..12, seed in any::<u64>()) {
        let b = random_vec(n * n, seed);
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] = (0..n).map(|k| b[k * n + i] * b[k * n + j]).sum::<f64>() + if i == j { 0.1 } else { 0.0 };
            }
        }
        let mut op = FiniteDifferenceHvp::new(Quadratic::new(n, a).unwrap(), vec![0.0f64; n], 1e-3).unwrap();
        let probe = power_iteration_on(&mut op, 30, 1e-12, seed).unwrap();
        let trace = &probe.rayleigh_trace;
        prop_assert!(trace.windows(2).all(|w| w[1] >= w[0] - 1e-9), "{:?}", trace);
        prop_assert!(probe.rayleigh >= trace.last().unwrap() - 1e-9);
        let norm: f64 = probe.v.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() <= 1e-6);
        prop_assert!(probe.cosine_trace.iter().all(|c| (-1.0..=1.0).contains(c)));
    }

    #[test]
    fn significance_ignores_sign(seed in any::<u64>()) {
        let net = mlp(4, 6, 3, seed);
        let v = random_vec(net.weight_count(), seed);
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        let a = significance_from_vector(&v, &net).unwrap();
        prop_assert_eq!(&a, &significance_from_vector(&neg, &net).unwrap());
        let norm: f64 = v.iter().map(|x| x * x).sum();
        prop_assert!((a.sum_of_squares() - norm).abs() <= 1e-9 * norm.max(1.0));
    }

    #[test]
    fn hvp_restores_parameters(seed in any::<u64>(), eps in 1e-6f64..1e-1) {
        let net = mlp(3, 5, 2, seed);
        let before = net.flatten_params();
        let batch = random_batch(&[3], 8, 2, seed);
        let v = random_vec(net.weight_count(), seed ^ 7);
        hvp_fd(&net, &batch, &v, eps).unwrap();
        let after = net.flatten_params();
        prop_assert!(before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn mad_is_symmetric_and_triangular(seed in any::<u64>()) {
        let a = mlp(4, 6, 3, seed);
        let b = mlp(4, 6, 3, seed.wrapping_add(1));
        let c = mlp(4, 6, 3, seed.wrapping_add(2));
        let probe = random_batch(&[4], 20, 3, seed).inputs().clone();
        let ab = mad(&a, &b, &probe).unwrap();
        let ba = mad(&b, &a, &probe).unwrap();
        let bc = mad(&b, &c, &probe).unwrap();
        let ac = mad(&a, &c, &probe).unwrap();
        for k in 0..ab.len() {
            prop_assert_eq!(ab[k].1, ba[k].1);
            prop_assert!(ac[k].1 <= ab[k].1 + bc[k].1 + 1e-6);
        }
        prop_assert!(mad(&a, &a, &probe).unwrap().iter().all(|m| m.1 == 0.0));
    }

    #[test]
    fn stats_ignore_probe_order(seed in any::<u64>(), n in 2usize..40) {
        let net = mlp(5, 9, 3, seed);
        let batch = random_batch(&[5], n, 3, seed ^ 1);
        let mut order: Vec<usize> = (0..n).collect();
        order.reverse();
        order.rotate_left((seed % n as u64) as usize);
        let shuffled = batch.select(&order).unwrap();
        let a = activation_stats(&net, batch.inputs()).unwrap();
        let b = activation_stats(&net, shuffled.inputs()).unwrap();
        for ((_, x), (_, y)) in a.iter().zip(&b) {
            prop_assert_eq!(x.min, y.min);
            prop_assert_eq!(x.max, y.max);
            prop_assert!((x.mean - y.mean).abs() <= 1e-12 * (1.0 + x.mean.abs()));
        }
    }

    #[test]
    fn masked_coordinates_stay_zero(seed in any::<u64>(), p in 1.0f64..=100.0, steps in 1usize..40) {
        let net = mlp(4, 8, 3, seed);
        let out = prune_with_significance(&net, Strategy::CampHive, p, &magnitude_significance(&net), seed).unwrap();
        let mut tuned = out.network.clone();
        let mask = tuned.param_mask_from_weight_mask(&out.mask.keep).unwrap();
        let batch = random_batch(&[4], 12, 3, seed);
        for _ in 0..steps {
            let (_, g) = tuned.loss_and_gradient(&batch).unwrap();
            tuned.sgd_step(&g, 0.5, Some(&mask)).unwrap();
        }
        for (keep, x) in mask.iter().zip(tuned.flatten_params()) {
            if !keep {
                prop_assert_eq!(x.to_bits(), 0);
            }
        }
    }

    #[test]
    fn loss_is_non_negative(seed in any::<u64>(), scale in 0.0f64..100.0) {
        let net = mlp(3, 4, 5, seed);
        let params: Vec<f64> = net.flatten_params().iter().map(|x| x * scale).collect();
        let net = net.with_params(&params).unwrap();
        let batch = random_batch(&[3], 10, 5, seed);
        if let Ok(loss) = net.loss(&batch) {
            prop_assert!(loss >= 0.0);
        }
    }

    #[test]
    fn flatten_roundtrip_is_bit_exact(seed in any::<u64>(), hidden in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Network::<f32>::tiny_conv(vec![1, 4 + hidden % 5, 4 + hidden % 3], 3, &mut rng).unwrap();
        let flat = net.flatten_params();
        let mut copy = net.clone();
        copy.unflatten_params(&flat).unwrap();
        prop_assert_eq!(copy, net);
    }

    #[test]
    fn delta_acc_is_a_difference(a in 0.0f64..=100.0, b in 0.0f64..=100.0) {
        let r = AccuracyReport::new(
            Accuracy { top1: a, top5: None, samples: 10 },
            Accuracy { top1: b, top5: None, samples: 10 },
        );
        prop_assert!((r.delta_acc - (b - a)).abs() <= 1e-9);
    }
}

#[test]
fn training_trajectory_is_bit_identical() {
    let run = || {
        let mut net = mlp(4, 6, 3, 9);
        let batch = random_batch(&[4], 30, 3, 9);
        camp_core::experiment::train_epochs(&mut net, &batch, 5, 0.1, 8, None, 9, camp_core::seeding::Stream::Shuffle)
            .unwrap();
        net.flatten_params().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn every_layer_kind_passes_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let conv = Layer::<f64>::init(
        camp_core::LayerSpec::Conv2d { in_channels: 2, out_channels: 3, kernel_h: 3, kernel_w: 2, stride: 2, padding: 1 },
        &mut rng,
    )
    .unwrap();
    let specs = [camp_core::LayerSpec::Relu, camp_core::LayerSpec::MaxPool2x2, camp_core::LayerSpec::Flatten];
    let mut layers = vec![conv];
    layers.extend(specs.iter().map(|s| Layer::activation(s.clone()).unwrap()));
    let probe = Network::new(vec![2, 7, 6], layers.clone()).unwrap();
    let flat = probe.output_shape(probe.layers().len() - 1)[0];
    layers.push(Layer::init(camp_core::LayerSpec::Dense { input_size: flat, output_size: 3 }, &mut rng).unwrap());
    let net = Network::new(vec![2, 7, 6], layers).unwrap();
    assert!(net.param_count() <= 100, "{}", net.param_count());
    let batch = random_batch(&[2, 7, 6], 5, 3, 4);
    let (_, g) = net.loss_and_gradient(&batch).unwrap();
    let numeric = common::numeric_gradient(&net, &batch, 1e-4);
    let e = common::rel_error(&g, &numeric);
    assert!(e <= 1e-3, "relative error {e}");
}

#[test]
fn tensor_rejects_zero_dims() {
    assert!(Tensor::<f64>::new(vec![2, 0], vec![]).is_err());
}
