use anytime_core::msdnet::{cumulative_loss, flops_per_exit, Mode, Network, NetworkConfig};
use anytime_core::oracle::relative_error;
use anytime_core::tensor::{Module, Tensor};
use anytime_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_batch(n: usize, size: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[n, 1, size, size], |_| rng.random_range(-1.0..1.0))
}

fn tiny() -> NetworkConfig {
    NetworkConfig {
        num_scales: 2,
        num_layers: 4,
        num_exits: 2,
        first_exit_layer: 2,
        exit_every: 2,
        bottleneck_factors: vec![1, 2],
        initial_channels: vec![3, 4],
        growth_rates: vec![2, 4],
        head_channels: 4,
        prune_scales: true,
        num_classes: 3,
        input_channels: 1,
        input_size: 8,
    }
}

#[test]
fn default_exits_sit_after_odd_layers() {
    let p = flops_per_exit(&NetworkConfig::paper()).unwrap();
    assert_eq!(p.exit_layers, vec![3, 5, 7, 9, 11, 13, 15]);
    let d = flops_per_exit(&NetworkConfig::desk()).unwrap();
    assert_eq!(d.exit_layers, vec![3, 5, 7, 9]);
}

#[test]
fn cost_grows_with_depth_within_range() {
    let p = flops_per_exit(&NetworkConfig::paper()).unwrap();
    assert!(p.cumulative_flops.windows(2).all(|w| w[1] > w[0]));
    let ratio = p.last() as f64 / p.first() as f64;
    assert!((2.5..=4.5).contains(&ratio), "last/first = {ratio}, {:?}", p.mflops());
}

#[test]
fn hand_counted_single_scale_network() {
    // stem 3x3 1->4 @8x8: 4608 + 512; bottleneck 1x1 4->2: 1024 + 256;
    // 3x3 2->2: 4608 + 256; head on 6 channels: 7040 + 1184 + 4 + 16.
    let cfg = NetworkConfig {
        num_scales: 1,
        num_layers: 2,
        num_exits: 1,
        first_exit_layer: 2,
        exit_every: 1,
        bottleneck_factors: vec![1],
        initial_channels: vec![4],
        growth_rates: vec![2],
        head_channels: 4,
        prune_scales: false,
        num_classes: 2,
        input_channels: 1,
        input_size: 8,
    };
    assert_eq!(flops_per_exit(&cfg).unwrap().cumulative_flops, vec![19_508]);
}

#[test]
fn dense_layers_see_every_earlier_output() {
    let cfg = NetworkConfig {
        prune_scales: false,
        ..NetworkConfig::desk()
    };
    let net = Network::build(&cfg, 0).unwrap();
    for layer in 2..=9 {
        for s in 0..3 {
            let expected = cfg.initial_channels[s] + (layer - 2) * cfg.growth_rates[s];
            assert_eq!(net.layer_input_channels(layer, s), Some(expected), "layer {layer} scale {s}");
        }
    }
}

#[test]
fn pruned_scales_are_skipped() {
    let net = Network::build(&NetworkConfig::paper(), 0).unwrap();
    // 15 layers over 3 scales: the finest scale drops out at layer 6,
    // the middle one at layer 11.
    assert!(net.layer_input_channels(5, 0).is_some());
    assert!(net.layer_input_channels(6, 0).is_none());
    assert!(net.layer_input_channels(10, 1).is_some());
    assert!(net.layer_input_channels(11, 1).is_none());
    assert!(net.layer_input_channels(15, 2).is_some());
}

#[test]
fn build_is_deterministic_and_seed_sensitive() {
    let cfg = NetworkConfig::desk();
    let x = random_batch(2, 32, 1);
    let a = Network::build(&cfg, 5).unwrap().forward(&x).unwrap();
    let b = Network::build(&cfg, 5).unwrap().forward(&x).unwrap();
    let c = Network::build(&cfg, 6).unwrap().forward(&x).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.num_exits(), 4);
    assert_eq!(a.0[0].shape(), &[2, 10]);
}

#[test]
fn eval_outputs_do_not_depend_on_batch_mates() {
    let net = Network::build(&NetworkConfig::desk(), 3).unwrap();
    let x = random_batch(3, 32, 9);
    let full = net.forward(&x).unwrap();
    for i in 0..3 {
        let single = net.forward(&x.batch_item(i)).unwrap();
        for k in 0..full.num_exits() {
            let row = &full.0[k].data()[i * 10..(i + 1) * 10];
            for (a, b) in row.iter().zip(single.0[k].data()) {
                assert!((a - b).abs() <= 1e-5, "exit {k} item {i}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn stepping_exit_by_exit_matches_full_pass() {
    let net = Network::build(&NetworkConfig::desk(), 3).unwrap();
    let x = random_batch(2, 32, 4);
    let full = net.forward(&x).unwrap();
    let mut cursor = net.start(&x).unwrap();
    for k in 0..net.num_exits() {
        assert_eq!(cursor.next_exit(), k);
        assert_eq!(net.advance(&mut cursor).unwrap().unwrap(), full.0[k]);
    }
    assert!(net.advance(&mut cursor).unwrap().is_none());
}

#[test]
fn train_and_eval_modes_share_weights_but_not_statistics() {
    let mut net = Network::build(&NetworkConfig::desk(), 3).unwrap();
    let x = random_batch(4, 32, 4);
    let eval = net.forward_all_exits(&x, Mode::Eval).unwrap();
    let train = net.forward_all_exits(&x, Mode::Train).unwrap();
    assert_eq!(eval.num_exits(), train.num_exits());
    assert_ne!(eval, train);
}

#[test]
fn wrong_input_shape_is_rejected() {
    let net = Network::build(&NetworkConfig::desk(), 0).unwrap();
    let x = Tensor::zeros(&[1, 3, 32, 32]);
    assert!(matches!(net.forward(&x), Err(Error::Input(_))));
}

#[test]
fn backward_requires_a_training_forward() {
    let mut net = Network::build(&tiny(), 0).unwrap();
    let g = vec![Tensor::zeros(&[1, 3]); 2];
    assert!(matches!(net.backward(&g), Err(Error::State(_))));
}

#[test]
fn uniform_logits_give_ln_classes_per_exit() {
    let logits = anytime_core::msdnet::ExitLogits(vec![Tensor::zeros(&[4, 10]); 7]);
    let loss = cumulative_loss(&logits, &[0, 3, 7, 9], &[1.0; 7]).unwrap();
    assert!((loss.total - 7.0 * 10f64.ln()).abs() < 1e-5, "{}", loss.total);
    assert!(matches!(
        cumulative_loss(&logits, &[0, 3, 7, 9], &[1.0, 1.0, -0.5, 1.0, 1.0, 1.0, 1.0]),
        Err(Error::Input(_))
    ));
}

#[test]
fn zeroed_classifiers_predict_uniformly() {
    let mut net = Network::build(&NetworkConfig::desk(), 0).unwrap();
    for head in net.heads_mut() {
        head.linear.visit_params(&mut |p| p.value.fill(0.0));
    }
    let x = random_batch(5, 32, 2);
    let logits = net.forward(&x).unwrap();
    for k in 0..logits.num_exits() {
        let ce = anytime_core::tensor::ops::softmax_cross_entropy(&logits.0[k], &[0, 1, 2, 3, 4]).unwrap();
        assert!((ce.loss - 10f64.ln()).abs() < 1e-6);
    }
}

/// Loss of a training-mode forward with every exit weighted equally.
fn train_loss(net: &mut Network, x: &Tensor, labels: &[usize]) -> f64 {
    let logits = net.forward_train(x).unwrap();
    cumulative_loss(&logits, labels, &[1.0, 0.5]).unwrap().total
}

#[test]
fn network_gradients_match_finite_differences() {
    let mut net = Network::build(&tiny(), 11).unwrap();
    let x = random_batch(4, 8, 12);
    let labels = [0, 2, 1, 2];
    let logits = net.forward_train(&x).unwrap();
    let loss = cumulative_loss(&logits, &labels, &[1.0, 0.5]).unwrap();
    net.zero_grad();
    net.backward(&loss.grads).unwrap();

    let mut names = Vec::new();
    net.visit_params(&mut |p| names.push(p.name.clone()));
    let mut checked = 0;
    for name in &names {
        let mut analytic = Vec::new();
        let mut value = Vec::new();
        net.visit_params(&mut |p| {
            if &p.name == name {
                analytic = p.grad.data().iter().map(|&g| f64::from(g)).collect();
                value = p.value.data().to_vec();
            }
        });
        let idx: Vec<usize> = (0..value.len()).step_by((value.len() / 6).max(1)).collect();
        let sub: Vec<f32> = idx.iter().map(|&i| value[i]).collect();
        // small steps keep probes off ReLU kinks; f32 rounding sets the floor
        let numeric = anytime_core::oracle::central_difference(&sub, 1e-4, |probe| {
            let mut v = value.clone();
            for (&i, &p) in idx.iter().zip(probe) {
                v[i] = p;
            }
            net.visit_params(&mut |p| {
                if &p.name == name {
                    p.value.data_mut().copy_from_slice(&v);
                }
            });
            train_loss(&mut net, &x, &labels)
        });
        net.visit_params(&mut |p| {
            if &p.name == name {
                p.value.data_mut().copy_from_slice(&value);
            }
        });
        let a: Vec<f64> = idx.iter().map(|&i| analytic[i]).collect();
        let norm: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-4 {
            continue;
        }
        let err = relative_error(&a, &numeric);
        assert!(err < 3e-2, "{name}: rel err {err}\n{a:?}\n{numeric:?}");
        checked += 1;
    }
    assert!(checked > names.len() / 2, "only {checked} of {} parameters checked", names.len());
}
