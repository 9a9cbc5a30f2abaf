use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{LayerPlan, NetworkConfig, ScaleStep};
use super::flops::{flops_per_exit, ExitProfile};
use crate::error::{Error, Result};
use crate::tensor::ops::{add_into_channels, concat_channels, global_avg_pool, global_avg_pool_backward, slice_channels, softmax_cross_entropy};
use crate::tensor::{ConvBnRelu, Linear, Module, Parameter, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, caches for backward, running-stat updates.
    Train,
    /// Running statistics; pure function of weights and input.
    Eval,
}

/// Logits of every exit, `[batch, classes]` each, shallowest first.
#[derive(Clone, Debug, PartialEq)]
pub struct ExitLogits(pub Vec<Tensor>);

impl ExitLogits {
    pub fn num_exits(&self) -> usize {
        self.0.len()
    }

    /// Arg-max class per example at exit `k`.
    pub fn predictions(&self, k: usize) -> Vec<usize> {
        argmax_rows(&self.0[k])
    }
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let classes = logits.shape()[1];
    logits
        .data()
        .chunks_exact(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Bottleneck 1x1 then 3x3 (stride 1 or 2).
#[derive(Clone, Debug)]
struct Branch {
    bottleneck: ConvBnRelu,
    conv: ConvBnRelu,
}

impl Branch {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.conv.forward(&self.bottleneck.forward(x)?)
    }

    fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let h = self.bottleneck.forward_train(x)?;
        self.conv.forward_train(&h)
    }

    fn backward(&mut self, g: &Tensor) -> Result<Tensor> {
        let g = self.conv.backward(g)?;
        self.bottleneck.backward(&g)
    }
}

impl Module for Branch {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.bottleneck.visit_params(f);
        self.conv.visit_params(f);
    }

    fn visit_state(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.bottleneck.visit_state(f);
        self.conv.visit_state(f);
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.bottleneck.visit_state_mut(f);
        self.conv.visit_state_mut(f);
    }
}

#[derive(Clone, Debug)]
struct ScaleUnit {
    step: ScaleStep,
    horizontal: Branch,
    diagonal: Option<Branch>,
}

/// Two strided conv blocks, global average pool, linear.
#[derive(Clone, Debug)]
pub struct ExitHead {
    conv1: ConvBnRelu,
    conv2: ConvBnRelu,
    pub linear: Linear,
    pooled_shape: Option<Vec<usize>>,
}

impl ExitHead {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv2.forward(&self.conv1.forward(x)?)?;
        self.linear.forward(&global_avg_pool(&h)?)
    }

    fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward_train(x)?;
        let h = self.conv2.forward_train(&h)?;
        self.pooled_shape = Some(h.shape().to_vec());
        self.linear.forward_train(&global_avg_pool(&h)?)
    }

    fn backward(&mut self, g: &Tensor) -> Result<Tensor> {
        let shape = self
            .pooled_shape
            .take()
            .ok_or_else(|| Error::State("exit head: backward before forward".into()))?;
        let g = self.linear.backward(g)?;
        let g = global_avg_pool_backward(&shape, &g)?;
        let g = self.conv2.backward(&g)?;
        self.conv1.backward(&g)
    }
}

impl Module for ExitHead {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.conv1.visit_params(f);
        self.conv2.visit_params(f);
        self.linear.visit_params(f);
    }

    fn visit_state(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.conv1.visit_state(f);
        self.conv2.visit_state(f);
        self.linear.visit_state(f);
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.conv1.visit_state_mut(f);
        self.conv2.visit_state_mut(f);
        self.linear.visit_state_mut(f);
    }
}

/// Partially evaluated forward pass: features computed so far and the next
/// exit to produce. Lets anytime inference stop after any exit.
#[derive(Clone, Debug)]
pub struct ForwardCursor {
    features: Vec<Option<Tensor>>,
    layers_done: usize,
    next_exit: usize,
}

impl ForwardCursor {
    pub fn next_exit(&self) -> usize {
        self.next_exit
    }
}

#[derive(Clone, Debug)]
struct TrainRecord {
    /// Feature stacks after the training forward, per scale.
    final_channels: Vec<usize>,
    batch: usize,
}

/// The multi-scale dense network with intermediate classifiers.
#[derive(Clone, Debug)]
pub struct Network {
    config: NetworkConfig,
    profile: ExitProfile,
    stem: Vec<ConvBnRelu>,
    /// `dense[l - 2]` is 1-indexed layer `l`.
    dense: Vec<Vec<ScaleUnit>>,
    heads: Vec<ExitHead>,
    record: Option<TrainRecord>,
}

impl Network {
    /// Builds the network with deterministic He-style initialization.
    pub fn build(config: &NetworkConfig, seed: u64) -> Result<Self> {
        let plan = LayerPlan::new(config)?;
        let profile = flops_per_exit(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem = plan
            .stem
            .iter()
            .enumerate()
            .map(|(s, &(cin, cout, stride, _))| {
                ConvBnRelu::new(&format!("stem.s{s}"), cin, cout, 3, stride, 1, &mut rng)
            })
            .collect();
        let mut dense = Vec::with_capacity(plan.dense.len());
        for (i, steps) in plan.dense.iter().enumerate() {
            let layer = i + 2;
            let units = steps
                .iter()
                .map(|st| {
                    let make = |kind: &str, b: &super::config::BranchPlan, rng: &mut ChaCha8Rng| {
                        let prefix = format!("layer{layer}.s{}.{kind}", st.scale);
                        Branch {
                            bottleneck: ConvBnRelu::new(
                                &format!("{prefix}.bottleneck"),
                                b.in_channels,
                                b.inner_channels,
                                1,
                                1,
                                0,
                                rng,
                            ),
                            conv: ConvBnRelu::new(
                                &format!("{prefix}.conv"),
                                b.inner_channels,
                                b.out_channels,
                                3,
                                b.stride,
                                1,
                                rng,
                            ),
                        }
                    };
                    let horizontal = make("horizontal", &st.horizontal, &mut rng);
                    let diagonal = st.diagonal.as_ref().map(|d| make("diagonal", d, &mut rng));
                    ScaleUnit {
                        step: *st,
                        horizontal,
                        diagonal,
                    }
                })
                .collect();
            dense.push(units);
        }
        let heads = plan
            .head_inputs
            .iter()
            .enumerate()
            .map(|(k, &cin)| {
                let hc = config.head_channels;
                ExitHead {
                    conv1: ConvBnRelu::new(&format!("exit{k}.conv1"), cin, hc, 3, 2, 1, &mut rng),
                    conv2: ConvBnRelu::new(&format!("exit{k}.conv2"), hc, hc, 3, 2, 1, &mut rng),
                    linear: Linear::new(&format!("exit{k}.linear"), hc, config.num_classes, &mut rng),
                    pooled_shape: None,
                }
            })
            .collect();
        Ok(Network {
            config: config.clone(),
            profile,
            stem,
            dense,
            heads,
            record: None,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn exit_profile(&self) -> &ExitProfile {
        &self.profile
    }

    pub fn num_exits(&self) -> usize {
        self.heads.len()
    }

    pub fn heads_mut(&mut self) -> &mut [ExitHead] {
        &mut self.heads
    }

    /// Channels fed to the horizontal path of 1-indexed `layer` at `scale`,
    /// if that scale is computed there.
    pub fn layer_input_channels(&self, layer: usize, scale: usize) -> Option<usize> {
        if layer < 2 {
            return None;
        }
        self.dense
            .get(layer - 2)?
            .iter()
            .find(|u| u.step.scale == scale)
            .map(|u| u.horizontal.bottleneck.in_channels())
    }

    fn check_input(&self, batch: &Tensor) -> Result<()> {
        let (_, c, h, w) = batch
            .dims4()
            .map_err(|_| Error::Input(format!("expected [B,C,H,W] input, got {:?}", batch.shape())))?;
        let n = self.config.input_size;
        if c != self.config.input_channels || h != n || w != n {
            return Err(Error::Input(format!(
                "expected input [B,{},{n},{n}], got {:?}",
                self.config.input_channels,
                batch.shape()
            )));
        }
        Ok(())
    }

    /// Starts an eval-mode forward pass; nothing is computed until
    /// [`Self::advance`].
    pub fn start(&self, batch: &Tensor) -> Result<ForwardCursor> {
        self.check_input(batch)?;
        let mut features = vec![None; self.config.num_scales];
        features[0] = Some(batch.clone());
        Ok(ForwardCursor {
            features,
            layers_done: 0,
            next_exit: 0,
        })
    }

    fn eval_layer(&self, cursor: &mut ForwardCursor) -> Result<()> {
        let layer = cursor.layers_done + 1;
        if layer == 1 {
            let mut x = cursor.features[0].take().expect("input set by start");
            for (s, conv) in self.stem.iter().enumerate() {
                x = conv.forward(&x)?;
                cursor.features[s] = Some(x.clone());
            }
        } else {
            let units = &self.dense[layer - 2];
            let mut fresh = Vec::with_capacity(units.len());
            for u in units {
                let own = cursor.features[u.step.scale].as_ref().expect("active scale");
                let h = u.horizontal.forward(own)?;
                let new = match &u.diagonal {
                    Some(d) => {
                        let finer = cursor.features[u.step.scale - 1].as_ref().expect("finer scale");
                        concat_channels(&[&h, &d.forward(finer)?])?
                    }
                    None => h,
                };
                fresh.push((u.step.scale, new));
            }
            for (s, new) in fresh {
                let old = cursor.features[s].take().expect("active scale");
                cursor.features[s] = Some(concat_channels(&[&old, &new])?);
            }
            // scales no longer used by any later layer can be released
            let keep_from = self
                .dense
                .get(layer - 1)
                .map_or(self.config.num_scales - 1, |next| next[0].step.scale.saturating_sub(1));
            cursor.features.iter_mut().take(keep_from).for_each(|f| *f = None);
        }
        cursor.layers_done = layer;
        Ok(())
    }

    /// Computes up to the next exit and returns its logits, or `None` once
    /// every exit has been produced.
    pub fn advance(&self, cursor: &mut ForwardCursor) -> Result<Option<Tensor>> {
        let Some(&target) = self.profile.exit_layers.get(cursor.next_exit) else {
            return Ok(None);
        };
        while cursor.layers_done < target {
            self.eval_layer(cursor)?;
        }
        let coarse = cursor.features[self.config.num_scales - 1]
            .as_ref()
            .expect("coarsest scale always kept");
        let logits = self.heads[cursor.next_exit].forward(coarse)?;
        cursor.next_exit += 1;
        Ok(Some(logits))
    }

    /// Eval-mode logits at every exit from one shared pass.
    pub fn forward(&self, batch: &Tensor) -> Result<ExitLogits> {
        let mut cursor = self.start(batch)?;
        let mut out = Vec::with_capacity(self.num_exits());
        while let Some(l) = self.advance(&mut cursor)? {
            out.push(l);
        }
        Ok(ExitLogits(out))
    }

    pub fn forward_all_exits(&mut self, batch: &Tensor, mode: Mode) -> Result<ExitLogits> {
        match mode {
            Mode::Eval => self.forward(batch),
            Mode::Train => self.forward_train(batch),
        }
    }

    /// Training-mode forward that records everything [`Self::backward`] needs.
    pub fn forward_train(&mut self, batch: &Tensor) -> Result<ExitLogits> {
        self.check_input(batch)?;
        let exit_layers = self.profile.exit_layers.clone();
        let coarsest = self.config.num_scales - 1;
        let mut features: Vec<Tensor> = Vec::with_capacity(self.config.num_scales);
        let mut x = batch.clone();
        for conv in self.stem.iter_mut() {
            x = conv.forward_train(&x)?;
            features.push(x.clone());
        }
        let mut logits = Vec::with_capacity(self.heads.len());
        let mut next_exit = 0;
        if exit_layers.first() == Some(&1) {
            logits.push(self.heads[0].forward_train(&features[coarsest])?);
            next_exit = 1;
        }
        for (i, units) in self.dense.iter_mut().enumerate() {
            let layer = i + 2;
            let mut fresh = Vec::with_capacity(units.len());
            for u in units.iter_mut() {
                let s = u.step.scale;
                let h = u.horizontal.forward_train(&features[s])?;
                let new = match u.diagonal.as_mut() {
                    Some(d) => concat_channels(&[&h, &d.forward_train(&features[s - 1])?])?,
                    None => h,
                };
                fresh.push((s, new));
            }
            for (s, new) in fresh {
                features[s] = concat_channels(&[&features[s], &new])?;
            }
            if exit_layers.get(next_exit) == Some(&layer) {
                logits.push(self.heads[next_exit].forward_train(&features[coarsest])?);
                next_exit += 1;
            }
        }
        self.record = Some(TrainRecord {
            final_channels: features.iter().map(|f| f.shape()[1]).collect(),
            batch: batch.shape()[0],
        });
        Ok(ExitLogits(logits))
    }

    /// Back-propagates per-exit logit gradients through the last training
    /// forward, accumulating into every parameter's gradient.
    pub fn backward(&mut self, exit_grads: &[Tensor]) -> Result<()> {
        let record = self
            .record
            .take()
            .ok_or_else(|| Error::State("network: backward called before forward_train".into()))?;
        if exit_grads.len() != self.heads.len() {
            return Err(Error::Input(format!(
                "{} exit gradients for {} exits",
                exit_grads.len(),
                self.heads.len()
            )));
        }
        let coarsest = self.config.num_scales - 1;
        let mut grads: Vec<Tensor> = record
            .final_channels
            .iter()
            .enumerate()
            .map(|(s, &c)| {
                let n = self.config.scale_size(s);
                Tensor::zeros(&[record.batch, c, n, n])
            })
            .collect();
        let exit_layers = self.profile.exit_layers.clone();
        let head_backward = |layer: usize, grads: &mut [Tensor], heads: &mut [ExitHead]| -> Result<()> {
            if let Some(k) = exit_layers.iter().position(|&l| l == layer) {
                let g = heads[k].backward(&exit_grads[k])?;
                add_into_channels(&mut grads[coarsest], 0, &g)?;
            }
            Ok(())
        };
        for i in (0..self.dense.len()).rev() {
            let layer = i + 2;
            head_backward(layer, &mut grads, &mut self.heads)?;
            for u in self.dense[i].iter_mut() {
                let s = u.step.scale;
                let new = slice_channels(&grads[s], u.step.channels_before, u.step.new_channels())?;
                let h_out = u.horizontal.conv.out_channels();
                let gh = if u.diagonal.is_some() {
                    slice_channels(&new, 0, h_out)?
                } else {
                    new.clone()
                };
                let gin = u.horizontal.backward(&gh)?;
                add_into_channels(&mut grads[s], 0, &gin)?;
                if let Some(d) = u.diagonal.as_mut() {
                    let gd = slice_channels(&new, h_out, d.conv.out_channels())?;
                    let gin = d.backward(&gd)?;
                    add_into_channels(&mut grads[s - 1], 0, &gin)?;
                }
            }
        }
        head_backward(1, &mut grads, &mut self.heads)?;
        for s in (0..self.stem.len()).rev() {
            let c = self.stem[s].out_channels();
            let g = slice_channels(&grads[s], 0, c)?;
            let gin = self.stem[s].backward(&g)?;
            if s > 0 {
                add_into_channels(&mut grads[s - 1], 0, &gin)?;
            }
        }
        Ok(())
    }

    /// `(name, shape)` of every persistent tensor in traversal order.
    pub fn state_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit_state(&mut |n, t| out.push((n.to_string(), t.shape().to_vec())));
        out
    }
}

impl Module for Network {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.stem.iter_mut().for_each(|m| m.visit_params(f));
        for units in self.dense.iter_mut() {
            for u in units.iter_mut() {
                u.horizontal.visit_params(f);
                if let Some(d) = u.diagonal.as_mut() {
                    d.visit_params(f);
                }
            }
        }
        self.heads.iter_mut().for_each(|h| h.visit_params(f));
    }

    fn visit_state(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.stem.iter().for_each(|m| m.visit_state(f));
        for units in &self.dense {
            for u in units {
                u.horizontal.visit_state(f);
                if let Some(d) = &u.diagonal {
                    d.visit_state(f);
                }
            }
        }
        self.heads.iter().for_each(|h| h.visit_state(f));
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.stem.iter_mut().for_each(|m| m.visit_state_mut(f));
        for units in self.dense.iter_mut() {
            for u in units.iter_mut() {
                u.horizontal.visit_state_mut(f);
                if let Some(d) = u.diagonal.as_mut() {
                    d.visit_state_mut(f);
                }
            }
        }
        self.heads.iter_mut().for_each(|h| h.visit_state_mut(f));
    }
}

/// Weighted sum of per-exit cross entropies, each averaged over the batch.
#[derive(Clone, Debug)]
pub struct CumulativeLoss {
    pub total: f64,
    pub per_exit: Vec<f64>,
    /// `d total / d logits` for each exit.
    pub grads: Vec<Tensor>,
}

pub fn cumulative_loss(logits: &ExitLogits, labels: &[usize], weights: &[f32]) -> Result<CumulativeLoss> {
    if weights.len() != logits.num_exits() {
        return Err(Error::Input(format!(
            "{} exit weights for {} exits",
            weights.len(),
            logits.num_exits()
        )));
    }
    if let Some(w) = weights.iter().find(|&&w| !(w >= 0.0)) {
        return Err(Error::Input(format!("exit weights must be >= 0, got {w}")));
    }
    let mut total = 0.0;
    let mut per_exit = Vec::with_capacity(weights.len());
    let mut grads = Vec::with_capacity(weights.len());
    for (l, &w) in logits.0.iter().zip(weights) {
        let ce = softmax_cross_entropy(l, labels)?;
        total += f64::from(w) * ce.loss;
        per_exit.push(ce.loss);
        let mut g = ce.grad;
        g.data_mut().iter_mut().for_each(|v| *v *= w);
        grads.push(g);
    }
    Ok(CumulativeLoss {
        total,
        per_exit,
        grads,
    })
}
