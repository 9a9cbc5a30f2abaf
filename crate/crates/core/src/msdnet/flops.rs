//! Analytic FLOP accounting. A multiply-add counts 2 FLOPs; batch norm,
//! ReLU and pooling count 1 FLOP per output element.

use serde::{Deserialize, Serialize};

use super::config::{BranchPlan, LayerPlan, NetworkConfig};
use crate::error::Result;

pub fn conv_flops(kernel: usize, cin: usize, cout: usize, out_h: usize, out_w: usize) -> u64 {
    2 * (kernel * kernel * cin * cout * out_h * out_w) as u64
}

/// Conv followed by batch norm and ReLU (2 elementwise ops per output).
pub fn conv_bn_relu_flops(kernel: usize, cin: usize, cout: usize, out_size: usize) -> u64 {
    conv_flops(kernel, cin, cout, out_size, out_size) + 2 * (cout * out_size * out_size) as u64
}

pub fn linear_flops(inputs: usize, outputs: usize) -> u64 {
    2 * (inputs * outputs) as u64
}

fn branch_flops(b: &BranchPlan) -> u64 {
    conv_bn_relu_flops(1, b.in_channels, b.inner_channels, b.in_size)
        + conv_bn_relu_flops(3, b.inner_channels, b.out_channels, b.out_size())
}

fn stride2(size: usize) -> usize {
    (size + 2 - 3) / 2 + 1
}

/// Cost of one exit classifier reading `channels` maps of side `size`.
pub fn head_flops(channels: usize, size: usize, head: usize, classes: usize) -> u64 {
    let s1 = stride2(size);
    let s2 = stride2(s1);
    conv_bn_relu_flops(3, channels, head, s1)
        + conv_bn_relu_flops(3, head, head, s2)
        + head as u64
        + linear_flops(head, classes)
}

/// Per-layer costs: `[0]` is the stem (layer 1), `[l - 1]` dense layer `l`.
pub fn layer_flops(config: &NetworkConfig) -> Result<Vec<u64>> {
    let plan = LayerPlan::new(config)?;
    let stem: u64 = plan
        .stem
        .iter()
        .map(|&(cin, cout, stride, in_size)| {
            let out = if stride == 1 { in_size } else { stride2(in_size) };
            conv_bn_relu_flops(3, cin, cout, out)
        })
        .sum();
    let mut costs = vec![stem];
    for steps in &plan.dense {
        costs.push(
            steps
                .iter()
                .map(|st| branch_flops(&st.horizontal) + st.diagonal.as_ref().map_or(0, branch_flops))
                .sum(),
        );
    }
    Ok(costs)
}

/// Per-exit cumulative cost and placement.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExitProfile {
    /// 1-indexed layer after which each exit sits.
    pub exit_layers: Vec<usize>,
    /// FLOPs needed to produce each exit's prediction, counting every layer
    /// and every earlier exit head evaluated on the way.
    pub cumulative_flops: Vec<u64>,
}

impl ExitProfile {
    pub fn num_exits(&self) -> usize {
        self.cumulative_flops.len()
    }

    pub fn mflops(&self) -> Vec<f64> {
        self.cumulative_flops.iter().map(|&f| f as f64 / 1e6).collect()
    }

    pub fn first(&self) -> u64 {
        self.cumulative_flops[0]
    }

    pub fn last(&self) -> u64 {
        *self.cumulative_flops.last().expect("at least one exit")
    }
}

pub fn flops_per_exit(config: &NetworkConfig) -> Result<ExitProfile> {
    let plan = LayerPlan::new(config)?;
    let layers = layer_flops(config)?;
    let coarse = config.scale_size(config.num_scales - 1);
    let exit_layers = config.exit_layers();
    let mut cumulative = Vec::with_capacity(exit_layers.len());
    let mut layers_done = 0;
    let mut total = 0u64;
    for (k, &layer) in exit_layers.iter().enumerate() {
        while layers_done < layer {
            total += layers[layers_done];
            layers_done += 1;
        }
        total += head_flops(
            plan.head_inputs[k],
            coarse,
            config.head_channels,
            config.num_classes,
        );
        cumulative.push(total);
    }
    Ok(ExitProfile {
        exit_layers,
        cumulative_flops: cumulative,
    })
}
