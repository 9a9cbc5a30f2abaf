use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ops;
use super::{Parameter, Tensor};
use crate::error::{Error, Result};

/// Named-state traversal shared by every layer and the network.
pub trait Module {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter));

    /// Every persistent tensor (parameters and running statistics), by name.
    fn visit_state(&self, f: &mut dyn FnMut(&str, &Tensor));

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn zero_grad(&mut self) {
        self.visit_params(&mut |p| p.zero_grad());
    }
}

fn missing_forward(layer: &str) -> Error {
    Error::State(format!("{layer}: backward called before a training forward pass"))
}

/// Bias-free 2-d convolution (every convolution here is followed by batch norm).
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Parameter,
    pub stride: usize,
    pub padding: usize,
    cached_input: Option<Tensor>,
}

impl Conv2d {
    /// He (fan-in) normal initialization.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f32;
        let normal = Normal::new(0.0f32, (2.0 / fan_in).sqrt()).expect("finite std");
        let weight = Tensor::from_fn(&[out_channels, in_channels, kernel, kernel], |_| {
            normal.sample(rng)
        });
        Self::from_weight(name, weight, stride, padding)
    }

    pub fn from_weight(name: &str, weight: Tensor, stride: usize, padding: usize) -> Self {
        Conv2d {
            weight: Parameter::new(format!("{name}.weight"), weight),
            stride,
            padding,
            cached_input: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.value.shape()[2]
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        ops::conv2d(input, &self.weight.value, self.stride, self.padding)
    }

    pub fn forward_train(&mut self, input: &Tensor) -> Result<Tensor> {
        let out = self.forward(input)?;
        self.cached_input = Some(input.clone());
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let input = self
            .cached_input
            .take()
            .ok_or_else(|| missing_forward(&self.weight.name))?;
        let (gi, gw) = ops::conv2d_backward(
            &input,
            &self.weight.value,
            grad_out,
            self.stride,
            self.padding,
        )?;
        self.weight.grad.add_assign(&gw)?;
        Ok(gi)
    }
}

impl Module for Conv2d {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.weight);
    }

    fn visit_state(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&self.weight.name, &self.weight.value);
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&self.weight.name, &mut self.weight.value);
    }
}

pub const BN_EPSILON: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Clone, Debug)]
struct BnCache {
    normalized: Tensor,
    inv_std: Vec<f32>,
}

/// Per-channel batch normalization over `(batch, height, width)`.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    name: String,
    pub gamma: Parameter,
    pub beta: Parameter,
    running: Option<(Tensor, Tensor)>,
    pub eps: f32,
    pub momentum: f32,
    cache: Option<BnCache>,
    eval_cache: Option<Tensor>,
}

impl BatchNorm2d {
    /// Fresh layer without running statistics; eval mode fails until a
    /// training pass has populated them.
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm2d {
            name: name.to_string(),
            gamma: Parameter::new(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: Parameter::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running: None,
            eps: BN_EPSILON,
            momentum: BN_MOMENTUM,
            cache: None,
            eval_cache: None,
        }
    }

    /// Layer with running statistics initialized to mean 0, variance 1.
    pub fn initialized(name: &str, channels: usize) -> Self {
        let mut bn = Self::new(name, channels);
        bn.running = Some((Tensor::zeros(&[channels]), Tensor::full(&[channels], 1.0)));
        bn
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    pub fn set_running_stats(&mut self, mean: Tensor, var: Tensor) {
        assert_eq!(mean.len(), self.channels());
        assert_eq!(var.len(), self.channels());
        self.running = Some((mean, var));
    }

    pub fn running_stats(&self) -> Option<(&Tensor, &Tensor)> {
        self.running.as_ref().map(|(m, v)| (m, v))
    }

    fn check_input(&self, input: &Tensor) -> Result<(usize, usize, usize)> {
        let (b, c, h, w) = input.dims4()?;
        if c != self.channels() {
            return Err(Error::Config(format!(
                "{}: expected {} channels, got {c}",
                self.name,
                self.channels()
            )));
        }
        Ok((b, c, h * w))
    }

    pub fn forward_eval(&self, input: &Tensor) -> Result<Tensor> {
        let (b, c, plane) = self.check_input(input)?;
        let (mean, var) = self.running.as_ref().ok_or_else(|| {
            Error::State(format!("{}: eval mode before any running statistics exist", self.name))
        })?;
        let mut out = input.clone();
        for item in 0..b {
            for ch in 0..c {
                let inv = 1.0 / (var.data()[ch] + self.eps).sqrt();
                let scale = self.gamma.value.data()[ch] * inv;
                let shift = self.beta.value.data()[ch] - mean.data()[ch] * scale;
                let base = (item * c + ch) * plane;
                out.data_mut()[base..base + plane]
                    .iter_mut()
                    .for_each(|v| *v = *v * scale + shift);
            }
        }
        Ok(out)
    }

    /// Eval-mode forward that remembers enough to run [`Self::backward`]
    /// (used for gradient checks of the inference path).
    pub fn forward_eval_train(&mut self, input: &Tensor) -> Result<Tensor> {
        let out = self.forward_eval(input)?;
        self.eval_cache = Some(input.clone());
        self.cache = None;
        Ok(out)
    }

    pub fn forward_train(&mut self, input: &Tensor) -> Result<Tensor> {
        let (b, c, plane) = self.check_input(input)?;
        let count = b * plane;
        if count < 2 {
            return Err(Error::Input(format!(
                "{}: train mode needs at least 2 values per channel, got {count}",
                self.name
            )));
        }
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        for item in 0..b {
            for ch in 0..c {
                let base = (item * c + ch) * plane;
                mean[ch] += input.data()[base..base + plane]
                    .iter()
                    .map(|&v| f64::from(v))
                    .sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        for item in 0..b {
            for ch in 0..c {
                let base = (item * c + ch) * plane;
                var[ch] += input.data()[base..base + plane]
                    .iter()
                    .map(|&v| (f64::from(v) - mean[ch]).powi(2))
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count as f64);

        let inv_std: Vec<f32> = var
            .iter()
            .map(|&v| (1.0 / (v + f64::from(self.eps)).sqrt()) as f32)
            .collect();
        let mut normalized = input.clone();
        let mut out = input.clone();
        for item in 0..b {
            for ch in 0..c {
                let base = (item * c + ch) * plane;
                let (m, inv) = (mean[ch] as f32, inv_std[ch]);
                let (g, be) = (self.gamma.value.data()[ch], self.beta.value.data()[ch]);
                for i in base..base + plane {
                    let xh = (input.data()[i] - m) * inv;
                    normalized.data_mut()[i] = xh;
                    out.data_mut()[i] = g * xh + be;
                }
            }
        }

        let (rm, rv) = self
            .running
            .get_or_insert_with(|| (Tensor::zeros(&[c]), Tensor::full(&[c], 1.0)));
        let unbias = count as f64 / (count as f64 - 1.0);
        for ch in 0..c {
            let mo = self.momentum;
            rm.data_mut()[ch] = (1.0 - mo) * rm.data()[ch] + mo * mean[ch] as f32;
            rv.data_mut()[ch] = (1.0 - mo) * rv.data()[ch] + mo * (var[ch] * unbias) as f32;
        }
        self.cache = Some(BnCache {
            normalized,
            inv_std,
        });
        self.eval_cache = None;
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        if let Some(input) = self.eval_cache.take() {
            return self.backward_eval(&input, grad_out);
        }
        let cache = self.cache.take().ok_or_else(|| missing_forward(&self.name))?;
        let (b, c, plane) = self.check_input(grad_out)?;
        let count = (b * plane) as f64;
        let mut sum_g = vec![0.0f64; c];
        let mut sum_gx = vec![0.0f64; c];
        for item in 0..b {
            for ch in 0..c {
                let base = (item * c + ch) * plane;
                for i in base..base + plane {
                    let g = f64::from(grad_out.data()[i]);
                    sum_g[ch] += g;
                    sum_gx[ch] += g * f64::from(cache.normalized.data()[i]);
                }
            }
        }
        let mut grad_in = grad_out.clone();
        for item in 0..b {
            for ch in 0..c {
                let base = (item * c + ch) * plane;
                let k = f64::from(self.gamma.value.data()[ch] * cache.inv_std[ch]) / count;
                for i in base..base + plane {
                    let g = f64::from(grad_out.data()[i]);
                    let xh = f64::from(cache.normalized.data()[i]);
                    grad_in.data_mut()[i] = (k * (count * g - sum_g[ch] - xh * sum_gx[ch])) as f32;
                }
            }
        }
        for ch in 0..c {
            self.gamma.grad.data_mut()[ch] += sum_gx[ch] as f32;
            self.beta.grad.data_mut()[ch] += sum_g[ch] as f32;
        }
        Ok(grad_in)
    }

    fn backward_eval(&mut self, input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
        let (b, c, plane) = self.check_input(grad_out)?;
        let (mean, var) = self
            .running
            .as_ref()
            .ok_or_else(|| Error::State(format!("{}: no running statistics", self.name)))?;
        let mut grad_in = grad_out.clone();
        for ch in 0..c {
            let inv = 1.0 / (var.data()[ch] + self.eps).sqrt();
            let scale = self.gamma.value.data()[ch] * inv;
            let (mut sg, mut sgx) = (0.0f64, 0.0f64);
            for item in 0..b {
                let base = (item * c + ch) * plane;
                for i in base..base + plane {
                    let g = grad_out.data()[i];
                    grad_in.data_mut()[i] = g * scale;
                    sg += f64::from(g);
                    sgx += f64::from(g * (input.data()[i] - mean.data()[ch]) * inv);
                }
            }
            self.gamma.grad.data_mut()[ch] += sgx as f32;
            self.beta.grad.data_mut()[ch] += sg as f32;
        }
        Ok(grad_in)
    }
}

impl Module for BatchNorm2d {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }

    fn visit_state(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&self.gamma.name, &self.gamma.value);
        f(&self.beta.name, &self.beta.value);
        if let Some((m, v)) = &self.running {
            f(&format!("{}.running_mean", self.name), m);
            f(&format!("{}.running_var", self.name), v);
        }
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&self.gamma.name, &mut self.gamma.value);
        f(&self.beta.name, &mut self.beta.value);
        let c = self.channels();
        let (m, v) = self
            .running
            .get_or_insert_with(|| (Tensor::zeros(&[c]), Tensor::full(&[c], 1.0)));
        f(&format!("{}.running_mean", self.name), m);
        f(&format!("{}.running_var", self.name), v);
    }
}

/// Convolution, batch norm, ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    cached_output: Option<Tensor>,
}

impl ConvBnRelu {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        ConvBnRelu {
            conv: Conv2d::new(
                &format!("{name}.conv"),
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                rng,
            ),
            bn: BatchNorm2d::initialized(&format!("{name}.bn"), out_channels),
            cached_output: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.conv.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels()
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let x = self.conv.forward(input)?;
        let x = self.bn.forward_eval(&x)?;
        Ok(ops::relu(&x))
    }

    pub fn forward_train(&mut self, input: &Tensor) -> Result<Tensor> {
        let x = self.conv.forward_train(input)?;
        let x = self.bn.forward_train(&x)?;
        let y = ops::relu(&x);
        self.cached_output = Some(y.clone());
        Ok(y)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let y = self
            .cached_output
            .take()
            .ok_or_else(|| missing_forward(&self.conv.weight.name))?;
        let g = ops::relu_backward(&y, grad_out)?;
        let g = self.bn.backward(&g)?;
        self.conv.backward(&g)
    }
}

impl Module for ConvBnRelu {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.conv.visit_params(f);
        self.bn.visit_params(f);
    }

    fn visit_state(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.conv.visit_state(f);
        self.bn.visit_state(f);
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.conv.visit_state_mut(f);
        self.bn.visit_state_mut(f);
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
    cached_input: Option<Tensor>,
}

impl Linear {
    /// Uniform `±1/sqrt(in)` weights, zero bias.
    pub fn new<R: Rng>(name: &str, in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_features as f32).sqrt();
        let weight =
            Tensor::from_fn(&[out_features, in_features], |_| rng.random_range(-bound..bound));
        Self::from_parts(name, weight, Tensor::zeros(&[out_features]))
    }

    pub fn from_parts(name: &str, weight: Tensor, bias: Tensor) -> Self {
        Linear {
            weight: Parameter::new(format!("{name}.weight"), weight),
            bias: Parameter::new(format!("{name}.bias"), bias),
            cached_input: None,
        }
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        ops::linear(input, &self.weight.value, &self.bias.value)
    }

    pub fn forward_train(&mut self, input: &Tensor) -> Result<Tensor> {
        let out = self.forward(input)?;
        self.cached_input = Some(input.clone());
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let input = self
            .cached_input
            .take()
            .ok_or_else(|| missing_forward(&self.weight.name))?;
        let (gi, gw, gb) = ops::linear_backward(&input, &self.weight.value, grad_out)?;
        self.weight.grad.add_assign(&gw)?;
        self.bias.grad.add_assign(&gb)?;
        Ok(gi)
    }
}

impl Module for Linear {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }

    fn visit_state(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&self.weight.name, &self.weight.value);
        f(&self.bias.name, &self.bias.value);
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&self.weight.name, &mut self.weight.value);
        f(&self.bias.name, &mut self.bias.value);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn backward_before_forward_is_state_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut conv = Conv2d::new("c", 1, 1, 3, 1, 1, &mut rng);
        let g = Tensor::zeros(&[1, 1, 4, 4]);
        assert!(matches!(conv.backward(&g), Err(Error::State(_))));
        let mut lin = Linear::new("l", 3, 2, &mut rng);
        assert!(matches!(lin.backward(&Tensor::zeros(&[1, 2])), Err(Error::State(_))));
    }

    #[test]
    fn eval_without_running_stats_is_state_error() {
        let bn = BatchNorm2d::new("bn", 2);
        let x = Tensor::zeros(&[1, 2, 2, 2]);
        assert!(matches!(bn.forward_eval(&x), Err(Error::State(_))));
        assert!(BatchNorm2d::initialized("bn", 2).forward_eval(&x).is_ok());
    }

    #[test]
    fn constant_channel_normalizes_to_zero() {
        let mut bn = BatchNorm2d::new("bn", 1);
        let x = Tensor::full(&[2, 1, 3, 3], 7.25);
        let y = bn.forward_train(&x).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn standardized_input_passes_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let raw: Vec<f32> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = raw.len() as f64;
        let mean = raw.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
        let var = raw.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
        let std = (var + f64::from(BN_EPSILON)).sqrt();
        let x = Tensor::new(
            vec![4, 1, 4, 4],
            raw.iter().map(|&v| ((f64::from(v) - mean) / std) as f32).collect(),
        )
        .unwrap();
        let mut bn = BatchNorm2d::new("bn", 1);
        let y = bn.forward_train(&x).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn train_mode_sets_mean_beta_and_std_gamma() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::from_fn(&[3, 2, 4, 4], |_| rng.random_range(-3.0..5.0));
        let mut bn = BatchNorm2d::new("bn", 2);
        bn.gamma.value.data_mut().copy_from_slice(&[2.0, 0.5]);
        bn.beta.value.data_mut().copy_from_slice(&[1.0, -1.0]);
        let y = bn.forward_train(&x).unwrap();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|b| {
                    let base = (b * 2 + ch) * 16;
                    y.data()[base..base + 16].iter().map(|&v| f64::from(v)).collect::<Vec<_>>()
                })
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!((m - f64::from(bn.beta.value.data()[ch])).abs() < 1e-4);
            assert!((v.sqrt() - f64::from(bn.gamma.value.data()[ch])).abs() < 1e-3);
        }
        let (rm, _) = bn.running_stats().unwrap();
        assert!(rm.data().iter().any(|&m| m != 0.0));
    }
}
