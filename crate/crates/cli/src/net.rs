//! prepare, train, evaluate, anytime.

use anyhow::{bail, Context};
use serde_json::json;

use anytime_core::anytime::{accuracy_vs_mflop, calibrate_thresholds, exit_for_budget, ConfidenceTable};
use anytime_core::checkpoint;
use anytime_core::data::{class_counts, to_grayscale, Normalization, CLASS_NAMES};
use anytime_core::msdnet::{Network, NetworkConfig};
use anytime_core::trainer::{evaluate, train, TrainConfig, TrainOptions};

use crate::settings::{AnytimeSection, EvaluateSection, PrepareSection, TrainSection};
use crate::util::{load_dataset, load_raw_cifar, write_summary, write_text, DirLock};

pub fn prepare(cfg: &PrepareSection) -> anyhow::Result<()> {
    let raw = load_raw_cifar(&cfg.data_dir)?;
    let _lock = DirLock::acquire(&cfg.out_dir)?;
    let gray: Vec<_> = raw.train.iter().map(to_grayscale).collect();
    let norm = Normalization::from_records(&gray)?;
    let counts = |recs: &[_]| -> serde_json::Value {
        let c = class_counts(recs);
        CLASS_NAMES.iter().zip(c).map(|(n, c)| (n.to_string(), json!(c))).collect()
    };
    let results = json!({
        "train_images": raw.train.len(),
        "test_images": raw.test.len(),
        "train_class_counts": counts(&raw.train),
        "test_class_counts": counts(&raw.test),
        "grayscale_normalization": norm,
    });
    let path = write_summary(&cfg.out_dir, "prepare", cfg, &results)?;
    println!("{} train / {} test images; stats in {}", raw.train.len(), raw.test.len(), path.display());
    Ok(())
}

fn presets_error(name: &str) -> anyhow::Error {
    anyhow::anyhow!("unknown preset {name:?}; available presets: paper, desk")
}

pub fn train_cmd(cfg: &TrainSection) -> anyhow::Result<()> {
    let net_cfg = NetworkConfig::preset(&cfg.preset).ok_or_else(|| presets_error(&cfg.preset))?;
    let mut tc = TrainConfig::preset(&cfg.preset).ok_or_else(|| presets_error(&cfg.preset))?;
    if let Some(v) = cfg.epochs {
        tc.epochs = v;
    }
    if let Some(v) = cfg.seed {
        tc.seed = v;
    }
    if cfg.train_images.is_some() {
        tc.train_images = cfg.train_images;
    }
    if let Some(v) = cfg.validation_size {
        tc.validation_size = v;
    }
    if let Some(v) = cfg.batch_size {
        tc.batch_size = v;
    }
    if let Some(v) = cfg.learning_rate {
        tc.learning_rate = v;
    }
    tc.validate()?;
    let data = load_dataset(&cfg.source())?;
    let _lock = DirLock::acquire(&cfg.out_dir)?;
    let (train_set, validation) = tc.split(&data.train)?;
    let norm = Normalization::from_records(train_set)?;
    let mut net = Network::build(&net_cfg, tc.seed)?;
    let effective = json!({ "section": cfg, "network": net_cfg, "train": tc, "data": data.description });
    tracing::info!(
        "training {} net ({} exits) on {} images, validating on {}",
        cfg.preset,
        net.num_exits(),
        train_set.len(),
        validation.len()
    );
    let started = std::time::Instant::now();
    let outcome = train(
        &mut net,
        train_set,
        validation,
        norm,
        &tc,
        &TrainOptions {
            output_dir: Some(cfg.out_dir.clone()),
            metadata: effective.clone(),
            verbose: true,
        },
    )?;
    let last = outcome.log.epochs.last();
    let results = json!({
        "best_epoch": outcome.best_epoch,
        "best_mean_val_accuracy": outcome.best_mean_accuracy,
        "final_val_accuracy": last.map(|e| e.val_accuracy.clone()),
        "final_loss": last.map(|e| e.loss),
        "exit_mflops": net.exit_profile().mflops(),
        "seconds": started.elapsed().as_secs_f64(),
        "artifacts": ["best.ckpt", "final.ckpt", "train_log.csv"],
    });
    write_summary(&cfg.out_dir, "train", &effective, &results)?;
    println!("done; checkpoints and log in {}", cfg.out_dir.display());
    Ok(())
}

fn test_images(
    data: &crate::util::Dataset,
    limit: Option<usize>,
) -> anyhow::Result<&[anytime_core::data::ImageRecord]> {
    let n = limit.unwrap_or(data.test.len()).min(data.test.len());
    if n == 0 {
        bail!("no test images selected");
    }
    Ok(&data.test[..n])
}

pub fn evaluate_cmd(cfg: &EvaluateSection) -> anyhow::Result<()> {
    let ck = checkpoint::load(&cfg.checkpoint).with_context(|| "loading checkpoint")?;
    let data = load_dataset(&cfg.source())?;
    let images = test_images(&data, cfg.limit)?;
    let _lock = DirLock::acquire(&cfg.out_dir)?;
    let m = evaluate(&ck.network, images, &ck.normalization, &cfg.noise, cfg.seed, cfg.batch_size)?;
    write_text(&cfg.out_dir.join("accuracy.csv"), &m.to_csv())?;
    let effective = json!({ "section": cfg, "data": data.description, "checkpoint_metadata": ck.metadata });
    write_summary(&cfg.out_dir, "evaluate", &effective, &m)?;
    print!("{}", m.to_csv());
    Ok(())
}

pub fn anytime_cmd(cfg: &AnytimeSection) -> anyhow::Result<()> {
    let ck = checkpoint::load(&cfg.checkpoint).with_context(|| "loading checkpoint")?;
    let data = load_dataset(&cfg.source())?;
    let images = test_images(&data, cfg.limit)?;
    let _lock = DirLock::acquire(&cfg.out_dir)?;
    let net = &ck.network;
    let curves = accuracy_vs_mflop(net, images, &ck.normalization, &cfg.noise, cfg.seed, cfg.batch_size)?;
    write_text(&cfg.out_dir.join("curves.csv"), &curves.to_csv()?)?;

    let clean = curves.points.iter().filter(|p| p.exit_index >= 0 && p.noise_sd == f64::from(cfg.noise[0]));
    let clean: Vec<_> = clean.collect();
    let mut budgets = Vec::new();
    for &b in &cfg.budgets_mflop {
        let entry = match exit_for_budget(net.exit_profile(), b * 1e6) {
            Ok(k) => json!({ "budget_mflop": b, "exit": k, "mflop": clean[k].mflop, "accuracy": clean[k].accuracy }),
            Err(e) => json!({ "budget_mflop": b, "error": e.to_string() }),
        };
        budgets.push(entry);
    }

    let calibration = match cfg.target_mflop {
        None => serde_json::Value::Null,
        Some(target) => {
            let split = cfg.calibration_images.min(images.len() / 2).max(1);
            let (cal, held_out) = images.split_at(split);
            let table = ConfidenceTable::build(net, cal, &ck.normalization, 0.0, cfg.seed, cfg.batch_size)?;
            let c = calibrate_thresholds(&table, target * 1e6)?;
            let eval = ConfidenceTable::build(net, held_out, &ck.normalization, 0.0, cfg.seed, cfg.batch_size)?;
            json!({
                "target_mflop": target,
                "threshold": c.theta,
                "calibration_images": cal.len(),
                "calibration_mean_mflop": c.mean_flops / 1e6,
                "held_out_images": held_out.len(),
                "held_out_mean_mflop": eval.mean_flops(c.theta) / 1e6,
                "held_out_accuracy": eval.accuracy(c.theta),
            })
        }
    };
    let effective = json!({ "section": cfg, "data": data.description, "checkpoint_metadata": ck.metadata });
    let results = json!({
        "exit_mflops": net.exit_profile().mflops(),
        "curves": "curves.csv",
        "budgets": budgets,
        "calibration": calibration,
    });
    write_summary(&cfg.out_dir, "anytime", &effective, &results)?;
    print!("{}", curves.to_csv()?);
    Ok(())
}
