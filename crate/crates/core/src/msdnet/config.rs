use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of the multi-scale dense network.
///
/// Layers are 1-indexed: layer 1 is the stem that creates every scale,
/// layers 2..=`num_layers` are the dense layers. Exits sit after layers
/// `first_exit_layer`, `first_exit_layer + exit_every`, ...
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub num_scales: usize,
    pub num_layers: usize,
    pub num_exits: usize,
    pub first_exit_layer: usize,
    pub exit_every: usize,
    /// Bottleneck width multiplier per scale.
    pub bottleneck_factors: Vec<usize>,
    /// Channels produced by the stem at each scale.
    pub initial_channels: Vec<usize>,
    /// New channels added per dense layer at each scale.
    pub growth_rates: Vec<usize>,
    /// Width of the two convolutions in every exit classifier.
    pub head_channels: usize,
    /// Drop the finest remaining scale as depth increases (layers split
    /// evenly between `num_scales` stages).
    pub prune_scales: bool,
    pub num_classes: usize,
    pub input_channels: usize,
    pub input_size: usize,
}

impl NetworkConfig {
    /// 15 layers, 7 exits (first after layer 3, then every 2), three scales
    /// with stem widths 8/14/16 and 1-1-1 bottlenecks.
    pub fn paper() -> Self {
        NetworkConfig {
            num_scales: 3,
            num_layers: 15,
            num_exits: 7,
            first_exit_layer: 3,
            exit_every: 2,
            bottleneck_factors: vec![1, 1, 1],
            initial_channels: vec![8, 14, 16],
            growth_rates: vec![6, 6, 6],
            head_channels: 32,
            prune_scales: true,
            num_classes: 10,
            input_channels: 1,
            input_size: 32,
        }
    }

    /// 9 layers, 4 exits: the laptop-scale variant.
    pub fn desk() -> Self {
        NetworkConfig {
            num_layers: 9,
            num_exits: 4,
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
        let err = |m: String| Err(Error::Config(m));
        let s = self.num_scales;
        if s == 0 {
            return err("num_scales must be >= 1".into());
        }
        for (name, v) in [
            ("bottleneck_factors", &self.bottleneck_factors),
            ("initial_channels", &self.initial_channels),
            ("growth_rates", &self.growth_rates),
        ] {
            if v.len() != s {
                return err(format!("{name} has {} entries for {s} scales", v.len()));
            }
            if v.iter().any(|&c| c == 0) {
                return err(format!("{name} entries must be >= 1"));
            }
        }
        if s > 1 && self.growth_rates[1..].iter().any(|&g| g < 2) {
            return err("growth rate must be >= 2 on scales fed by two paths".into());
        }
        if self.num_layers == 0 || self.num_exits == 0 || self.first_exit_layer == 0 {
            return err("num_layers, num_exits and first_exit_layer must be >= 1".into());
        }
        if self.num_exits > 1 && self.exit_every == 0 {
            return err("exit_every must be >= 1 with several exits".into());
        }
        let last = self.first_exit_layer + (self.num_exits - 1) * self.exit_every;
        if last > self.num_layers {
            return err(format!(
                "last exit would sit after layer {last} but the network has {} layers",
                self.num_layers
            ));
        }
        if self.head_channels == 0 || self.num_classes < 2 || self.input_channels == 0 {
            return err("head_channels, input_channels must be >= 1 and num_classes >= 2".into());
        }
        if self.input_size >> (s - 1) == 0 || self.input_size % (1 << (s - 1)) != 0 {
            return err(format!(
                "input size {} cannot be halved {} times",
                self.input_size,
                s - 1
            ));
        }
        Ok(())
    }

    /// 1-indexed layers after which an exit classifier sits.
    pub fn exit_layers(&self) -> Vec<usize> {
        (0..self.num_exits)
            .map(|k| self.first_exit_layer + k * self.exit_every)
            .collect()
    }

    /// Spatial side length at scale `s`.
    pub fn scale_size(&self, s: usize) -> usize {
        self.input_size >> s
    }

    /// First active scale at 1-indexed `layer`; scales `first..num_scales` are computed.
    pub fn first_active_scale(&self, layer: usize) -> usize {
        if !self.prune_scales || layer <= 1 {
            return 0;
        }
        ((layer - 1) * self.num_scales / self.num_layers).min(self.num_scales - 1)
    }

    /// The last layer that actually needs computing. With pruning every
    /// layer still feeds the coarsest scale, so this is `num_layers` only if
    /// the final exit sits there.
    pub fn last_needed_layer(&self) -> usize {
        *self.exit_layers().last().expect("num_exits >= 1")
    }
}

/// One `bottleneck 1x1 -> 3x3` path inside a dense layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BranchPlan {
    pub in_channels: usize,
    pub inner_channels: usize,
    pub out_channels: usize,
    /// 1 for horizontal paths, 2 for paths arriving from the finer scale.
    pub stride: usize,
    /// Spatial side of the branch input.
    pub in_size: usize,
}

impl BranchPlan {
    fn new(in_channels: usize, out_channels: usize, factor: usize, stride: usize, in_size: usize) -> Self {
        BranchPlan {
            in_channels,
            inner_channels: in_channels.min(factor * out_channels),
            out_channels,
            stride,
            in_size,
        }
    }

    pub fn out_size(&self) -> usize {
        (self.in_size + 2 - 3) / self.stride + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScaleStep {
    pub scale: usize,
    /// Channels of the dense feature stack at this scale before the layer.
    pub channels_before: usize,
    pub horizontal: BranchPlan,
    pub diagonal: Option<BranchPlan>,
}

impl ScaleStep {
    pub fn new_channels(&self) -> usize {
        self.horizontal.out_channels + self.diagonal.map_or(0, |d| d.out_channels)
    }
}

/// Shapes of every block in the network, derived from the config alone.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerPlan {
    /// `(in_channels, out_channels, stride, in_size)` of each stem convolution.
    pub stem: Vec<(usize, usize, usize, usize)>,
    /// `dense[l - 2]` holds the steps of 1-indexed layer `l`.
    pub dense: Vec<Vec<ScaleStep>>,
    /// Coarsest-scale channels seen by each exit head.
    pub head_inputs: Vec<usize>,
    /// Final channel count of each scale's feature stack.
    pub final_channels: Vec<usize>,
}

impl LayerPlan {
    pub fn new(config: &NetworkConfig) -> Result<Self> {
        config.validate()?;
        let s_count = config.num_scales;
        let mut stem = Vec::with_capacity(s_count);
        for s in 0..s_count {
            if s == 0 {
                stem.push((config.input_channels, config.initial_channels[0], 1, config.input_size));
            } else {
                stem.push((
                    config.initial_channels[s - 1],
                    config.initial_channels[s],
                    2,
                    config.scale_size(s - 1),
                ));
            }
        }
        let mut channels = config.initial_channels.clone();
        let exit_layers = config.exit_layers();
        let mut head_inputs = Vec::with_capacity(config.num_exits);
        let coarsest = s_count - 1;
        if exit_layers.contains(&1) {
            head_inputs.push(channels[coarsest]);
        }
        let mut dense = Vec::new();
        for layer in 2..=config.last_needed_layer() {
            let first = config.first_active_scale(layer);
            let mut steps = Vec::new();
            for s in first..s_count {
                let g = config.growth_rates[s];
                let size = config.scale_size(s);
                let step = if s > first {
                    let diag_out = g / 2;
                    ScaleStep {
                        scale: s,
                        channels_before: channels[s],
                        horizontal: BranchPlan::new(
                            channels[s],
                            g - diag_out,
                            config.bottleneck_factors[s],
                            1,
                            size,
                        ),
                        diagonal: Some(BranchPlan::new(
                            channels[s - 1],
                            diag_out,
                            config.bottleneck_factors[s - 1],
                            2,
                            config.scale_size(s - 1),
                        )),
                    }
                } else {
                    ScaleStep {
                        scale: s,
                        channels_before: channels[s],
                        horizontal: BranchPlan::new(
                            channels[s],
                            g,
                            config.bottleneck_factors[s],
                            1,
                            size,
                        ),
                        diagonal: None,
                    }
                };
                steps.push(step);
            }
            for step in &steps {
                channels[step.scale] += step.new_channels();
            }
            dense.push(steps);
            if exit_layers.contains(&layer) {
                head_inputs.push(channels[coarsest]);
            }
        }
        Ok(LayerPlan {
            stem,
            dense,
            head_inputs,
            final_channels: channels,
        })
    }
}
