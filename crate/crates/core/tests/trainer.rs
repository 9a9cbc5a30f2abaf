use anytime_core::checkpoint;
use anytime_core::data::{synthetic_images, ImageRecord, Normalization, TrainNoisePolicy, IMAGE_PIXELS};
use anytime_core::msdnet::{Network, NetworkConfig};
use anytime_core::tensor::Module;
use anytime_core::trainer::{evaluate, train, Sgd, TrainConfig, TrainOptions};
use anytime_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        validation_size: 0,
        train_images: None,
        ..TrainConfig::desk()
    }
}

fn param_snapshot(net: &mut Network) -> Vec<Vec<f32>> {
    let mut out = Vec::new();
    net.visit_params(&mut |p| out.push(p.value.data().to_vec()));
    out
}

#[test]
fn presets_follow_the_schedule() {
    let p = TrainConfig::paper();
    assert_eq!((p.epochs, p.batch_size), (300, 64));
    assert!((p.lr_at(0) - 0.1).abs() < 1e-12);
    assert!((p.lr_at(149) - 0.1).abs() < 1e-12);
    assert!((p.lr_at(150) - 0.01).abs() < 1e-12);
    assert!((p.lr_at(225) - 0.001).abs() < 1e-12);
    let d = TrainConfig::desk();
    assert_eq!((d.epochs, d.train_images, d.validation_size), (20, Some(10_000), 5000));
    assert!(TrainConfig::preset("nope").is_none());
}

#[test]
fn validation_split_is_the_disjoint_tail() {
    let imgs = synthetic_images(16_000, 0);
    let (tr, val) = TrainConfig::desk().split(&imgs).unwrap();
    assert_eq!((tr.len(), val.len()), (10_000, 5000));
    assert!(std::ptr::eq(&val[0], &imgs[11_000]));
    assert!(std::ptr::eq(&tr[9_999], &imgs[9_999]));
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let imgs = synthetic_images(64, 1);
    let norm = Normalization::from_records(&imgs).unwrap();
    let mut net = Network::build(&NetworkConfig::desk(), 0).unwrap();
    let before = param_snapshot(&mut net);
    let cfg = TrainConfig {
        learning_rate: 0.0,
        batch_size: 32,
        ..small_cfg(1)
    };
    train(&mut net, &imgs, &[], norm, &cfg, &TrainOptions::default()).unwrap();
    assert_eq!(before, param_snapshot(&mut net));
}

#[test]
fn weight_decay_alone_shrinks_parameters() {
    let mut net = Network::build(&NetworkConfig::desk(), 0).unwrap();
    net.zero_grad();
    let norm = |net: &mut Network| {
        let mut s = 0.0;
        net.visit_params(&mut |p| s += p.value.squared_norm());
        s
    };
    let before = norm(&mut net);
    Sgd::default().step(&mut net, 0.1, 0.9, 1e-2);
    assert!(norm(&mut net) < before);
}

#[test]
fn single_batch_is_memorized() {
    let imgs = synthetic_images(64, 2);
    let norm = Normalization::from_records(&imgs).unwrap();
    let mut net = Network::build(&NetworkConfig::desk(), 3).unwrap();
    let cfg = TrainConfig {
        noise: TrainNoisePolicy::none(),
        ..small_cfg(200)
    };
    train(&mut net, &imgs, &[], norm, &cfg, &TrainOptions::default()).unwrap();
    let m = evaluate(&net, &imgs, &norm, &[0.0], 0, 64).unwrap();
    assert_eq!(m.accuracy.last().unwrap()[0], 1.0, "{:?}", m.accuracy);
}

#[test]
fn seeded_runs_produce_identical_logs() {
    let imgs = synthetic_images(192, 3);
    let norm = Normalization::from_records(&imgs).unwrap();
    let cfg = TrainConfig {
        validation_size: 64,
        ..small_cfg(2)
    };
    let (tr, val) = cfg.split(&imgs).unwrap();
    let run = || {
        let mut net = Network::build(&NetworkConfig::desk(), 9).unwrap();
        train(&mut net, tr, val, norm, &cfg, &TrainOptions::default()).unwrap().log
    };
    let (a, b) = (run(), run());
    assert_eq!(a.to_csv_untimed(), b.to_csv_untimed());
    assert_eq!(a.epochs.len(), 2);
    assert!(a.to_csv().starts_with("epoch,loss,acc_exit_0,acc_exit_1,acc_exit_2,acc_exit_3,lr,seconds\n"));
}

#[test]
fn non_finite_loss_names_epoch_and_batch() {
    let imgs = synthetic_images(64, 4);
    let norm = Normalization::from_records(&imgs).unwrap();
    let mut net = Network::build(&NetworkConfig::desk(), 0).unwrap();
    for h in net.heads_mut() {
        h.linear.visit_params(&mut |p| p.value.fill(f32::NAN));
    }
    let err = train(&mut net, &imgs, &[], norm, &small_cfg(1), &TrainOptions::default()).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { epoch: 0, batch: 0 }), "{err}");
}

#[test]
fn checkpoints_are_written_and_reload_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let imgs = synthetic_images(160, 5);
    let norm = Normalization::from_records(&imgs).unwrap();
    let cfg = TrainConfig {
        validation_size: 32,
        ..small_cfg(2)
    };
    let (tr, val) = cfg.split(&imgs).unwrap();
    let mut net = Network::build(&NetworkConfig::desk(), 1).unwrap();
    let opts = TrainOptions {
        output_dir: Some(dir.path().to_path_buf()),
        ..Default::default()
    };
    train(&mut net, tr, val, norm, &cfg, &opts).unwrap();
    for f in ["best.ckpt", "final.ckpt", "train_log.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let ck = checkpoint::load(&dir.path().join("final.ckpt")).unwrap();
    assert_eq!(ck.normalization, norm);
    let sds = [0.0, 0.1, 0.5];
    let a = evaluate(&net, val, &norm, &sds, 7, 16).unwrap();
    let b = evaluate(&ck.network, val, &ck.normalization, &sds, 7, 16).unwrap();
    assert_eq!(a, b);
    let bytes = std::fs::read(dir.path().join("final.ckpt")).unwrap();
    let re = checkpoint::encode(&ck.network, &ck.normalization, &ck.metadata).unwrap();
    assert!(bytes == re, "re-encoding a loaded checkpoint changed its bytes");
}

#[test]
fn damaged_checkpoint_is_corrupt() {
    let dir = tempfile::tempdir().unwrap();
    let net = Network::build(&NetworkConfig::desk(), 1).unwrap();
    let path = dir.path().join("x.ckpt");
    checkpoint::save(&path, &net, &Normalization::identity(), &serde_json::Value::Null).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 4);
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(checkpoint::load(&path), Err(Error::Corrupt { .. })));
    bytes[0] = b'X';
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(checkpoint::load(&path), Err(Error::Corrupt { .. })));
}

/// Labels drawn independently of the pixels, so nothing can beat chance.
fn shuffled_labels(n: usize) -> Vec<ImageRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    synthetic_images(n, 6)
        .into_iter()
        .map(|mut r| {
            r.label = rng.random_range(0..10);
            r
        })
        .collect()
}

#[test]
fn untrained_network_is_at_chance() {
    let imgs = shuffled_labels(1000);
    let net = Network::build(&NetworkConfig::desk(), 2).unwrap();
    let m = evaluate(&net, &imgs, &Normalization::from_records(&imgs).unwrap(), &[0.0, 0.5], 0, 200).unwrap();
    // 4 standard errors of a binomial(1000, 0.1)
    let tol = 4.0 * (0.09f64 / 1000.0).sqrt();
    for row in &m.accuracy {
        for &a in row {
            assert!((a - 0.1).abs() < tol, "{:?}", m.accuracy);
        }
    }
}

#[test]
fn accuracy_is_continuous_in_noise() {
    let imgs = synthetic_images(500, 7);
    let norm = Normalization::from_records(&imgs).unwrap();
    let net = Network::build(&NetworkConfig::desk(), 4).unwrap();
    let m = evaluate(&net, &imgs, &norm, &[0.0, 1e-9], 3, 250).unwrap();
    for row in &m.accuracy {
        assert!((row[0] - row[1]).abs() <= 0.002, "{row:?}");
    }
    assert_eq!(m.n, 500);
    assert_eq!(m.mflops.len(), 4);
    assert!(m.to_csv().starts_with("exit_index,mflop,sd_0,sd_0.000000001\n"));
}

#[test]
fn evaluation_ignores_batch_size() {
    let imgs = synthetic_images(50, 8);
    let norm = Normalization::from_records(&imgs).unwrap();
    let net = Network::build(&NetworkConfig::desk(), 4).unwrap();
    let a = evaluate(&net, &imgs, &norm, &[0.2], 3, 7).unwrap();
    let b = evaluate(&net, &imgs, &norm, &[0.2], 3, 50).unwrap();
    assert_eq!(a.accuracy, b.accuracy);
    assert_eq!(imgs[0].pixels.len(), IMAGE_PIXELS);
}
