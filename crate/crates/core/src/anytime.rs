//! Budgeted and confidence-threshold early exit, threshold calibration and
//! accuracy-vs-MFLOP curves.

use serde::{Deserialize, Serialize};

use crate::data::{ImageRecord, Normalization};
use crate::error::{Error, Result};
use crate::msdnet::{ExitProfile, Network};
use crate::tensor::ops::softmax;
use crate::tensor::Tensor;
use crate::trainer::evaluate;

/// Bisection stops once the bracket on θ is narrower than this.
pub const THRESHOLD_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnytimeResult {
    pub class: usize,
    pub exit: usize,
    pub flops: u64,
    /// Max softmax probability at the exit used.
    pub confidence: f32,
}

fn row_max(probs: &Tensor, i: usize) -> (usize, f32) {
    let k = probs.shape()[1];
    probs.data()[i * k..(i + 1) * k]
        .iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |b, (c, &p)| if p > b.1 { (c, p) } else { b })
}

/// Largest exit whose cumulative cost fits in `budget`.
pub fn exit_for_budget(profile: &ExitProfile, budget: f64) -> Result<usize> {
    if !(budget >= profile.first() as f64) {
        return Err(Error::BudgetInfeasible {
            budget,
            first_exit: profile.first(),
        });
    }
    Ok(profile
        .cumulative_flops
        .iter()
        .rposition(|&c| c as f64 <= budget)
        .expect("first exit fits"))
}

/// Runs the network only as far as the budget allows; the answer comes from
/// the deepest affordable exit. `images` is a normalized `[B, C, H, W]` batch.
pub fn predict_budgeted(net: &Network, images: &Tensor, budget: f64) -> Result<Vec<AnytimeResult>> {
    let exit = exit_for_budget(net.exit_profile(), budget)?;
    let mut cursor = net.start(images)?;
    let mut logits = None;
    while cursor.next_exit() <= exit {
        logits = net.advance(&mut cursor)?;
    }
    let probs = softmax(&logits.expect("at least one exit evaluated"))?;
    let flops = net.exit_profile().cumulative_flops[exit];
    Ok((0..images.shape()[0])
        .map(|i| {
            let (class, confidence) = row_max(&probs, i);
            AnytimeResult {
                class,
                exit,
                flops,
                confidence,
            }
        })
        .collect())
}

/// Each image leaves at the first exit whose max softmax reaches that exit's
/// threshold, otherwise at the last exit. Evaluation stops as soon as every
/// image in the batch has left.
pub fn predict_threshold(net: &Network, images: &Tensor, thresholds: &[f32]) -> Result<Vec<AnytimeResult>> {
    if thresholds.len() != net.num_exits() {
        return Err(Error::Input(format!(
            "{} thresholds for {} exits",
            thresholds.len(),
            net.num_exits()
        )));
    }
    let n = images.shape()[0];
    let last = net.num_exits() - 1;
    let profile = net.exit_profile();
    let mut out: Vec<Option<AnytimeResult>> = vec![None; n];
    let mut cursor = net.start(images)?;
    while let Some(logits) = net.advance(&mut cursor)? {
        let k = cursor.next_exit() - 1;
        let probs = softmax(&logits)?;
        for (i, slot) in out.iter_mut().enumerate().filter(|(_, s)| s.is_none()) {
            let (class, confidence) = row_max(&probs, i);
            if confidence >= thresholds[k] || k == last {
                *slot = Some(AnytimeResult {
                    class,
                    exit: k,
                    flops: profile.cumulative_flops[k],
                    confidence,
                });
            }
        }
        if out.iter().all(Option::is_some) {
            break;
        }
    }
    Ok(out.into_iter().map(|r| r.expect("last exit assigns all")).collect())
}

/// Predicted class and confidence of every image at every exit; enough to
/// replay any threshold policy without touching the network again.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceTable {
    /// `classes[i][k]`.
    pub classes: Vec<Vec<usize>>,
    pub confidences: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
    pub cumulative_flops: Vec<u64>,
}

impl ConfidenceTable {
    pub fn build(
        net: &Network,
        records: &[ImageRecord],
        norm: &Normalization,
        sd: f32,
        seed: u64,
        batch_size: usize,
    ) -> Result<Self> {
        let mut classes = Vec::with_capacity(records.len());
        let mut confidences = Vec::with_capacity(records.len());
        let mut start = 0;
        while start < records.len() {
            let end = (start + batch_size.max(1)).min(records.len());
            let x = crate::data::eval_tensor(records, start..end, norm, sd, seed)?;
            let logits = net.forward(&x)?;
            let probs = logits.0.iter().map(softmax).collect::<Result<Vec<_>>>()?;
            for i in 0..end - start {
                let (c, p): (Vec<usize>, Vec<f32>) = probs.iter().map(|pr| row_max(pr, i)).unzip();
                classes.push(c);
                confidences.push(p);
            }
            start = end;
        }
        Ok(ConfidenceTable {
            classes,
            confidences,
            labels: records.iter().map(|r| usize::from(r.label)).collect(),
            cumulative_flops: net.exit_profile().cumulative_flops.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Exit chosen for image `i` under one shared threshold.
    pub fn exit_for(&self, i: usize, theta: f64) -> usize {
        let conf = &self.confidences[i];
        conf.iter()
            .position(|&c| f64::from(c) >= theta)
            .unwrap_or(conf.len() - 1)
    }

    pub fn exits(&self, theta: f64) -> Vec<usize> {
        (0..self.len()).map(|i| self.exit_for(i, theta)).collect()
    }

    pub fn mean_flops(&self, theta: f64) -> f64 {
        let total: f64 = (0..self.len())
            .map(|i| self.cumulative_flops[self.exit_for(i, theta)] as f64)
            .sum();
        total / self.len() as f64
    }

    pub fn accuracy(&self, theta: f64) -> f64 {
        let correct = (0..self.len())
            .filter(|&i| self.classes[i][self.exit_for(i, theta)] == self.labels[i])
            .count();
        correct as f64 / self.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub theta: f64,
    pub mean_flops: f64,
    pub accuracy: f64,
    pub iterations: usize,
}

/// Largest shared θ whose mean cost on the table stays within
/// `target_mean_flops`, by bisection on `[0, 1]`. Mean cost never falls as θ
/// rises, so the feasible set is an interval starting at 0.
pub fn calibrate_thresholds(table: &ConfidenceTable, target_mean_flops: f64) -> Result<Calibration> {
    if table.is_empty() {
        return Err(Error::Input("calibration needs a non-empty validation set".into()));
    }
    let first = table.cumulative_flops[0];
    if !(target_mean_flops >= first as f64) {
        return Err(Error::BudgetInfeasible {
            budget: target_mean_flops,
            first_exit: first,
        });
    }
    let done = |theta: f64, iterations| Calibration {
        theta,
        mean_flops: table.mean_flops(theta),
        accuracy: table.accuracy(theta),
        iterations,
    };
    if table.mean_flops(1.0) <= target_mean_flops {
        return Ok(done(1.0, 0));
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    let mut iterations = 0;
    while hi - lo >= THRESHOLD_TOLERANCE {
        let mid = 0.5 * (lo + hi);
        if table.mean_flops(mid) <= target_mean_flops {
            lo = mid;
        } else {
            hi = mid;
        }
        iterations += 1;
    }
    Ok(done(lo, iterations))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub noise_sd: f64,
    /// -1 marks the zero-cost chance point.
    pub exit_index: i64,
    pub mflop: f64,
    pub accuracy: f64,
    pub n: usize,
}

/// Accuracy vs cumulative MFLOPs, one curve per noise level, each starting at
/// (0 MFLOP, chance) by convention.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveSet {
    pub chance: f64,
    pub points: Vec<CurvePoint>,
}

impl CurveSet {
    pub fn noise_levels(&self) -> Vec<f64> {
        let mut sds: Vec<f64> = Vec::new();
        for p in &self.points {
            if !sds.contains(&p.noise_sd) {
                sds.push(p.noise_sd);
            }
        }
        sds
    }

    pub fn curve(&self, sd: f64) -> Vec<&CurvePoint> {
        self.points.iter().filter(|p| p.noise_sd == sd).collect()
    }

    /// Header `noise_sd,exit_index,mflop,accuracy,n`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for p in &self.points {
            w.serialize(p).map_err(|e| Error::Encoding(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Encoding(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Encoding(e.to_string()))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let points = r
            .deserialize()
            .collect::<std::result::Result<Vec<CurvePoint>, _>>()
            .map_err(|e| Error::Input(format!("curve csv: {e}")))?;
        let chance = points
            .iter()
            .find(|p| p.exit_index < 0)
            .map_or(0.1, |p| p.accuracy);
        Ok(CurveSet { chance, points })
    }
}

pub fn accuracy_vs_mflop(
    net: &Network,
    records: &[ImageRecord],
    norm: &Normalization,
    noise_sds: &[f32],
    seed: u64,
    batch_size: usize,
) -> Result<CurveSet> {
    let m = evaluate(net, records, norm, noise_sds, seed, batch_size)?;
    let chance = 1.0 / net.config().num_classes as f64;
    let mut points = Vec::new();
    for (j, &sd) in noise_sds.iter().enumerate() {
        let sd = f64::from(sd);
        points.push(CurvePoint {
            noise_sd: sd,
            exit_index: -1,
            mflop: 0.0,
            accuracy: chance,
            n: 0,
        });
        for (k, row) in m.accuracy.iter().enumerate() {
            points.push(CurvePoint {
                noise_sd: sd,
                exit_index: k as i64,
                mflop: m.mflops[k],
                accuracy: row[j],
                n: m.n,
            });
        }
    }
    Ok(CurveSet { chance, points })
}
