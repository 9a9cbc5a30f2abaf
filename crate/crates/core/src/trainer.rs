//! SGD training on the weighted cumulative exit loss, and evaluation of the
//! accuracy matrix (exit x noise level).

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{eval_tensor, train_batch_pipeline, ImageRecord, Normalization, TrainNoisePolicy};
use crate::error::{Error, Result};
use crate::msdnet::{argmax_rows, cumulative_loss, Network};
use crate::tensor::{Module, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Fractions of training after which the rate is multiplied by `lr_decay`.
    pub lr_milestones: Vec<f64>,
    pub lr_decay: f64,
    pub seed: u64,
    pub noise: TrainNoisePolicy,
    /// Held out from the end of the training set.
    pub validation_size: usize,
    /// Cap on training images taken from the front of the remaining set.
    pub train_images: Option<usize>,
    /// Per-exit loss weights; equal weights when absent.
    pub exit_weights: Option<Vec<f32>>,
}

impl TrainConfig {
    pub fn paper() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 64,
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_milestones: vec![0.5, 0.75],
            lr_decay: 0.1,
            seed: 0,
            noise: TrainNoisePolicy::default(),
            validation_size: 5000,
            train_images: None,
            exit_weights: None,
        }
    }

    pub fn desk() -> Self {
        TrainConfig {
            epochs: 20,
            train_images: Some(10_000),
            ..Self::paper()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "paper" => Some(Self::paper()),
            "desk" => Some(Self::desk()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "need learning_rate >= 0, momentum in [0, 1), weight_decay >= 0".into(),
            ));
        }
        if self.lr_milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::Config("lr milestones are fractions in [0, 1]".into()));
        }
        self.noise.validate()
    }

    /// Learning rate in force during 0-indexed `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self
            .lr_milestones
            .iter()
            .filter(|&&m| epoch >= (m * self.epochs as f64).round() as usize)
            .count();
        self.learning_rate * self.lr_decay.powi(drops as i32)
    }

    /// `(train, validation)`: validation is the last `validation_size`
    /// records, training the first `train_images` of the rest.
    pub fn split<'a>(&self, records: &'a [ImageRecord]) -> Result<(&'a [ImageRecord], &'a [ImageRecord])> {
        if records.len() <= self.validation_size {
            return Err(Error::Input(format!(
                "{} training records cannot hold a {}-image validation split",
                records.len(),
                self.validation_size
            )));
        }
        let cut = records.len() - self.validation_size;
        let n = self.train_images.map_or(cut, |t| t.min(cut));
        Ok((&records[..n], &records[cut..]))
    }
}

/// SGD with momentum and L2 weight decay (decay folded into the gradient).
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn step(&mut self, net: &mut Network, lr: f64, momentum: f64, weight_decay: f64) {
        let (lr, m, wd) = (lr as f32, momentum as f32, weight_decay as f32);
        let velocity = &mut self.velocity;
        let mut i = 0;
        net.visit_params(&mut |p| {
            if velocity.len() <= i {
                velocity.push(Tensor::zeros(p.value.shape()));
            }
            let v = velocity[i].data_mut();
            let w = p.value.data_mut();
            for ((vi, wi), gi) in v.iter_mut().zip(w.iter_mut()).zip(p.grad.data()) {
                *vi = m * *vi + gi + wd * *wi;
                *wi -= lr * *vi;
            }
            i += 1;
        });
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub val_accuracy: Vec<f64>,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    fn csv(&self, timing: bool) -> String {
        let exits = self.epochs.first().map_or(0, |e| e.val_accuracy.len());
        let mut out = String::from("epoch,loss");
        for k in 0..exits {
            let _ = write!(out, ",acc_exit_{k}");
        }
        out.push_str(",lr");
        if timing {
            out.push_str(",seconds");
        }
        out.push('\n');
        for e in &self.epochs {
            let _ = write!(out, "{},{}", e.epoch, e.loss);
            for a in &e.val_accuracy {
                let _ = write!(out, ",{a}");
            }
            let _ = write!(out, ",{}", e.lr);
            if timing {
                let _ = write!(out, ",{:.3}", e.seconds);
            }
            out.push('\n');
        }
        out
    }

    /// `epoch,loss,acc_exit_0..,lr,seconds`.
    pub fn to_csv(&self) -> String {
        self.csv(true)
    }

    /// The log without the wall-clock column: identical across seeded reruns.
    pub fn to_csv_untimed(&self) -> String {
        self.csv(false)
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Where `best.ckpt`, `final.ckpt` and `train_log.csv` go.
    pub output_dir: Option<PathBuf>,
    /// Extra metadata stored in checkpoints.
    pub metadata: serde_json::Value,
    pub verbose: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: TrainLog,
    pub best_epoch: usize,
    pub best_mean_accuracy: f64,
}

/// Trains `net` in place. Checkpoints are written whenever mean validation
/// accuracy over exits improves, and once more at the end.
pub fn train(
    net: &mut Network,
    train_set: &[ImageRecord],
    validation: &[ImageRecord],
    norm: Normalization,
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    let weights = cfg
        .exit_weights
        .clone()
        .unwrap_or_else(|| vec![1.0; net.num_exits()]);
    if let Some(dir) = &opts.output_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut sgd = Sgd::default();
    let mut log = TrainLog::default();
    let mut best = (0, f64::NEG_INFINITY);
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cfg.lr_at(epoch);
        let epoch_seed = crate::data::derive_seed(cfg.seed, epoch as u64);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for (b, batch) in
            train_batch_pipeline(train_set, &cfg.noise, norm, cfg.batch_size, epoch_seed)?.enumerate()
        {
            let batch = batch?;
            let logits = net.forward_train(&batch.images)?;
            let loss = cumulative_loss(&logits, &batch.labels, &weights)?;
            if !loss.total.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            net.zero_grad();
            net.backward(&loss.grads)?;
            sgd.step(net, lr, cfg.momentum, cfg.weight_decay);
            loss_sum += loss.total * batch.labels.len() as f64;
            seen += batch.labels.len();
        }
        let val_accuracy = if validation.is_empty() {
            Vec::new()
        } else {
            evaluate(net, validation, &norm, &[0.0], cfg.seed, cfg.batch_size.max(100))?.column(0)
        };
        let entry = EpochLog {
            epoch,
            loss: loss_sum / seen as f64,
            lr,
            seconds: started.elapsed().as_secs_f64(),
            val_accuracy,
        };
        if opts.verbose {
            eprintln!(
                "epoch {epoch}: loss {:.4} val {:?} ({:.1}s)",
                entry.loss, entry.val_accuracy, entry.seconds
            );
        }
        let mean = if entry.val_accuracy.is_empty() {
            -entry.loss
        } else {
            entry.val_accuracy.iter().sum::<f64>() / entry.val_accuracy.len() as f64
        };
        log.epochs.push(entry);
        if let Some(dir) = &opts.output_dir {
            let path = dir.join("train_log.csv");
            fs::write(&path, log.to_csv()).map_err(|e| Error::io(&path, e))?;
            let meta = serde_json::json!({
                "epoch": epoch,
                "mean_val_accuracy": mean,
                "train": cfg,
                "extra": opts.metadata,
            });
            if mean > best.1 {
                checkpoint::save(&dir.join("best.ckpt"), net, &norm, &meta)?;
            }
            if epoch + 1 == cfg.epochs {
                checkpoint::save(&dir.join("final.ckpt"), net, &norm, &meta)?;
            }
        }
        if mean > best.1 {
            best = (epoch, mean);
        }
    }
    Ok(TrainOutcome {
        log,
        best_epoch: best.0,
        best_mean_accuracy: best.1,
    })
}

/// Top-1 accuracy per exit and noise level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub noise_sds: Vec<f32>,
    /// Cumulative MFLOPs of each exit.
    pub mflops: Vec<f64>,
    /// `accuracy[exit][sd index]`.
    pub accuracy: Vec<Vec<f64>>,
    /// Images per cell.
    pub n: usize,
}

impl AccuracyMatrix {
    /// Accuracy of every exit at noise index `j`.
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.accuracy.iter().map(|row| row[j]).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("exit_index,mflop");
        for sd in &self.noise_sds {
            let _ = write!(out, ",sd_{sd}");
        }
        out.push('\n');
        for (k, row) in self.accuracy.iter().enumerate() {
            let _ = write!(out, "{k},{}", self.mflops[k]);
            for a in row {
                let _ = write!(out, ",{a}");
            }
            out.push('\n');
        }
        out
    }
}

/// Per-image predictions at every exit, for one noise level.
pub fn predictions_at_noise(
    net: &Network,
    records: &[ImageRecord],
    norm: &Normalization,
    sd: f32,
    seed: u64,
    batch_size: usize,
) -> Result<Vec<Vec<usize>>> {
    let mut preds = vec![Vec::with_capacity(records.len()); net.num_exits()];
    let mut start = 0;
    while start < records.len() {
        let end = (start + batch_size.max(1)).min(records.len());
        let x = eval_tensor(records, start..end, norm, sd, seed)?;
        let logits = net.forward(&x)?;
        for (k, l) in logits.0.iter().enumerate() {
            preds[k].extend(argmax_rows(l));
        }
        start = end;
    }
    Ok(preds)
}

/// Every image gets its own noise seed (independent of the SD), so every
/// exit and every SD see the same noise pattern, scaled.
pub fn evaluate(
    net: &Network,
    records: &[ImageRecord],
    norm: &Normalization,
    noise_sds: &[f32],
    seed: u64,
    batch_size: usize,
) -> Result<AccuracyMatrix> {
    if records.is_empty() {
        return Err(Error::Input("empty evaluation set".into()));
    }
    let mut accuracy = vec![Vec::with_capacity(noise_sds.len()); net.num_exits()];
    for &sd in noise_sds {
        let preds = predictions_at_noise(net, records, norm, sd, seed, batch_size)?;
        for (k, p) in preds.iter().enumerate() {
            let correct = p
                .iter()
                .zip(records)
                .filter(|(&c, r)| c == usize::from(r.label))
                .count();
            accuracy[k].push(correct as f64 / records.len() as f64);
        }
    }
    Ok(AccuracyMatrix {
        noise_sds: noise_sds.to_vec(),
        mflops: net.exit_profile().mflops(),
        accuracy,
        n: records.len(),
    })
}
