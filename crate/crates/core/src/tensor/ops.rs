//! Forward and backward kernels. Backward functions take the forward inputs
//! (or whatever the forward pass cached) plus the upstream gradient.

use super::gemm::{gemm, MatRef};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<Self> {
        let (batch, in_channels, in_h, in_w) = input.dims4()?;
        let (out_channels, wcin, kh, kw) = weight.dims4()?;
        if wcin != in_channels {
            return Err(Error::Config(format!(
                "conv2d: input has {in_channels} channels but weight expects {wcin}"
            )));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d: stride must be positive".into()));
        }
        let (out_h, out_w) = conv_output_size(in_h, in_w, kh, kw, stride, padding)?;
        Ok(ConvGeometry {
            batch,
            in_channels,
            in_h,
            in_w,
            out_channels,
            kh,
            kw,
            stride,
            padding,
            out_h,
            out_w,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }
}

pub fn conv_output_size(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize)> {
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::Config(format!(
            "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * padding,
            w + 2 * padding
        )));
    }
    Ok((
        (h + 2 * padding - kh) / stride + 1,
        (w + 2 * padding - kw) / stride + 1,
    ))
}

fn im2col(g: &ConvGeometry, image: &[f32], cols: &mut [f32]) {
    let plane = g.out_plane();
    for c in 0..g.in_channels {
        let channel = &image[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let dst_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        dst_row.fill(0.0);
                        continue;
                    }
                    let src_row = &channel[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *d = if ix < 0 || ix >= g.in_w as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeometry, cols: &[f32], image: &mut [f32]) {
    let plane = g.out_plane();
    for c in 0..g.in_channels {
        let channel = &mut image[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst_row = &mut channel[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst_row[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `input [B,Cin,H,W]` with `weight [Cout,Cin,kh,kw]`
/// using zero padding.
pub fn conv2d(input: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(input, weight, stride, padding)?;
    let in_len = g.in_channels * g.in_h * g.in_w;
    let out_len = g.out_channels * g.out_plane();
    let mut out = Tensor::zeros(&[g.batch, g.out_channels, g.out_h, g.out_w]);
    let w = MatRef::new(weight.data(), g.out_channels, g.patch_len());
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; g.patch_len() * g.out_plane()]
    };
    for b in 0..g.batch {
        let image = &input.data()[b * in_len..(b + 1) * in_len];
        let dst = &mut out.data_mut()[b * out_len..(b + 1) * out_len];
        if g.is_pointwise() {
            gemm(w, MatRef::new(image, g.patch_len(), g.out_plane()), 0.0, dst);
        } else {
            im2col(&g, image, &mut cols);
            gemm(w, MatRef::new(&cols, g.patch_len(), g.out_plane()), 0.0, dst);
        }
    }
    Ok(out)
}

/// Returns `(grad_input, grad_weight)`.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Tensor)> {
    let g = ConvGeometry::new(input, weight, stride, padding)?;
    if grad_out.shape() != [g.batch, g.out_channels, g.out_h, g.out_w] {
        return Err(Error::Config(format!(
            "conv2d backward: gradient shape {:?} does not match output",
            grad_out.shape()
        )));
    }
    let in_len = g.in_channels * g.in_h * g.in_w;
    let out_len = g.out_channels * g.out_plane();
    let k = g.patch_len();
    let n = g.out_plane();
    let mut grad_input = Tensor::zeros(input.shape());
    let mut grad_weight = Tensor::zeros(weight.shape());
    let mut cols = vec![0.0; if g.is_pointwise() { 0 } else { k * n }];
    let mut grad_cols = vec![0.0; if g.is_pointwise() { 0 } else { k * n }];
    for b in 0..g.batch {
        let image = &input.data()[b * in_len..(b + 1) * in_len];
        let gout = &grad_out.data()[b * out_len..(b + 1) * out_len];
        let gout_m = MatRef::new(gout, g.out_channels, n);
        if g.is_pointwise() {
            gemm(gout_m, MatRef::t(image, k, n), 1.0, grad_weight.data_mut());
            let gin = &mut grad_input.data_mut()[b * in_len..(b + 1) * in_len];
            gemm(MatRef::t(weight.data(), g.out_channels, k), gout_m, 0.0, gin);
        } else {
            im2col(&g, image, &mut cols);
            gemm(gout_m, MatRef::t(&cols, k, n), 1.0, grad_weight.data_mut());
            gemm(
                MatRef::t(weight.data(), g.out_channels, k),
                gout_m,
                0.0,
                &mut grad_cols,
            );
            let gin = &mut grad_input.data_mut()[b * in_len..(b + 1) * in_len];
            col2im(&g, &grad_cols, gin);
        }
    }
    Ok((grad_input, grad_weight))
}

pub fn relu(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

/// Gradient of ReLU given its forward output.
pub fn relu_backward(output: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if output.shape() != grad_out.shape() {
        return Err(Error::Config("relu backward: shape mismatch".into()));
    }
    let mut g = grad_out.clone();
    g.data_mut()
        .iter_mut()
        .zip(output.data())
        .for_each(|(g, &y)| {
            if y <= 0.0 {
                *g = 0.0
            }
        });
    Ok(g)
}

/// Non-overlapping `k x k` average pooling (stride `k`, floor on the edges).
pub fn avg_pool2d(input: &Tensor, k: usize) -> Result<Tensor> {
    let (b, c, h, w) = input.dims4()?;
    if k == 0 || k > h || k > w {
        return Err(Error::Config(format!("avg_pool2d: kernel {k} for {h}x{w} input")));
    }
    let (oh, ow) = (h / k, w / k);
    let scale = 1.0 / (k * k) as f32;
    let mut out = Tensor::zeros(&[b, c, oh, ow]);
    let src = input.data();
    let dst = out.data_mut();
    for plane in 0..b * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f32;
                for i in 0..k {
                    for j in 0..k {
                        acc += src[plane * h * w + (oy * k + i) * w + ox * k + j];
                    }
                }
                dst[plane * oh * ow + oy * ow + ox] = acc * scale;
            }
        }
    }
    Ok(out)
}

pub fn avg_pool2d_backward(input_shape: &[usize], k: usize, grad_out: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = match *input_shape {
        [b, c, h, w] => (b, c, h, w),
        _ => return Err(Error::Config("avg_pool2d backward: need 4-d shape".into())),
    };
    let (oh, ow) = (h / k, w / k);
    if grad_out.shape() != [b, c, oh, ow] {
        return Err(Error::Config("avg_pool2d backward: gradient shape mismatch".into()));
    }
    let scale = 1.0 / (k * k) as f32;
    let mut grad = Tensor::zeros(input_shape);
    let g = grad_out.data();
    let dst = grad.data_mut();
    for plane in 0..b * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let v = g[plane * oh * ow + oy * ow + ox] * scale;
                for i in 0..k {
                    for j in 0..k {
                        dst[plane * h * w + (oy * k + i) * w + ox * k + j] = v;
                    }
                }
            }
        }
    }
    Ok(grad)
}

/// Mean over the spatial axes: `[B,C,H,W] -> [B,C]`.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = input.dims4()?;
    let plane = h * w;
    let data = input
        .data()
        .chunks_exact(plane)
        .map(|p| (p.iter().map(|&v| f64::from(v)).sum::<f64>() / plane as f64) as f32)
        .collect();
    Tensor::new(vec![b, c], data)
}

pub fn global_avg_pool_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = match *input_shape {
        [b, c, h, w] => (b, c, h, w),
        _ => return Err(Error::Config("global_avg_pool backward: need 4-d shape".into())),
    };
    if grad_out.shape() != [b, c] {
        return Err(Error::Config("global_avg_pool backward: gradient shape mismatch".into()));
    }
    let scale = 1.0 / (h * w) as f32;
    let data = grad_out
        .data()
        .iter()
        .flat_map(|&g| std::iter::repeat(g * scale).take(h * w))
        .collect();
    Tensor::new(input_shape.to_vec(), data)
}

/// `input [B,in] * weight[out,in]^T + bias[out]`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (b, inf) = input.dims2()?;
    let (outf, winf) = weight.dims2()?;
    if winf != inf || bias.len() != outf {
        return Err(Error::Config(format!(
            "linear: input {:?}, weight {:?}, bias {:?} are incompatible",
            input.shape(),
            weight.shape(),
            bias.shape()
        )));
    }
    let mut out = Tensor::zeros(&[b, outf]);
    for row in out.data_mut().chunks_exact_mut(outf) {
        row.copy_from_slice(bias.data());
    }
    gemm(
        MatRef::new(input.data(), b, inf),
        MatRef::t(weight.data(), outf, inf),
        1.0,
        out.data_mut(),
    );
    Ok(out)
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub fn linear_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (b, inf) = input.dims2()?;
    let (outf, _) = weight.dims2()?;
    if grad_out.shape() != [b, outf] {
        return Err(Error::Config("linear backward: gradient shape mismatch".into()));
    }
    let mut grad_input = Tensor::zeros(&[b, inf]);
    gemm(
        MatRef::new(grad_out.data(), b, outf),
        MatRef::new(weight.data(), outf, inf),
        0.0,
        grad_input.data_mut(),
    );
    let mut grad_weight = Tensor::zeros(&[outf, inf]);
    gemm(
        MatRef::t(grad_out.data(), b, outf),
        MatRef::new(input.data(), b, inf),
        0.0,
        grad_weight.data_mut(),
    );
    let mut grad_bias = Tensor::zeros(&[outf]);
    for row in grad_out.data().chunks_exact(outf) {
        grad_bias
            .data_mut()
            .iter_mut()
            .zip(row)
            .for_each(|(g, &v)| *g += v);
    }
    Ok((grad_input, grad_weight, grad_bias))
}

/// Concatenates `[B,Ci,H,W]` tensors along the channel axis, in argument order.
pub fn concat_channels(inputs: &[&Tensor]) -> Result<Tensor> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::Config("concat_channels: no inputs".into()))?;
    let (b, _, h, w) = first.dims4()?;
    let mut total = 0;
    for t in inputs {
        let (tb, tc, th, tw) = t.dims4()?;
        if (tb, th, tw) != (b, h, w) {
            return Err(Error::Config(format!(
                "concat_channels: {:?} does not match batch/spatial dims of {:?}",
                t.shape(),
                first.shape()
            )));
        }
        total += tc;
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(b * total * plane);
    for item in 0..b {
        for t in inputs {
            let per = t.shape()[1] * plane;
            data.extend_from_slice(&t.data()[item * per..(item + 1) * per]);
        }
    }
    Tensor::new(vec![b, total, h, w], data)
}

/// Channels `[start, start + len)` of a `[B,C,H,W]` tensor.
pub fn slice_channels(input: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let (b, c, h, w) = input.dims4()?;
    if len == 0 || start + len > c {
        return Err(Error::Config(format!(
            "slice_channels: [{start}, {}) outside {c} channels",
            start + len
        )));
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(b * len * plane);
    for item in 0..b {
        let base = item * c * plane + start * plane;
        data.extend_from_slice(&input.data()[base..base + len * plane]);
    }
    Tensor::new(vec![b, len, h, w], data)
}

/// Adds `src [B,k,H,W]` into channels `[start, start + k)` of `dst`.
pub fn add_into_channels(dst: &mut Tensor, start: usize, src: &Tensor) -> Result<()> {
    let (b, c, h, w) = dst.dims4()?;
    let (sb, sc, sh, sw) = src.dims4()?;
    if (sb, sh, sw) != (b, h, w) || start + sc > c {
        return Err(Error::Config(format!(
            "add_into_channels: {:?} at channel {start} does not fit {:?}",
            src.shape(),
            dst.shape()
        )));
    }
    let plane = h * w;
    for item in 0..b {
        let base = item * c * plane + start * plane;
        let s = &src.data()[item * sc * plane..(item + 1) * sc * plane];
        dst.data_mut()[base..base + sc * plane]
            .iter_mut()
            .zip(s)
            .for_each(|(d, &v)| *d += v);
    }
    Ok(())
}

/// Result of [`softmax_cross_entropy`].
#[derive(Clone, Debug)]
pub struct CrossEntropy {
    /// Mean negative log-likelihood over the batch.
    pub loss: f64,
    /// Row-wise softmax of the logits.
    pub probs: Tensor,
    /// `d loss / d logits`.
    pub grad: Tensor,
}

pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let (_, k) = logits.dims2()?;
    let mut probs = logits.clone();
    for row in probs.data_mut().chunks_exact_mut(k) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f64> = row.iter().map(|&v| f64::from(v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        row.iter_mut().zip(&exps).for_each(|(p, &e)| *p = (e / z) as f32);
    }
    Ok(probs)
}

pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<CrossEntropy> {
    let (b, k) = logits.dims2()?;
    if labels.len() != b {
        return Err(Error::Input(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Input(format!("label {bad} outside [0, {k})")));
    }
    let probs = softmax(logits)?;
    let mut loss = 0.0f64;
    let mut grad = probs.clone();
    for (i, (&label, row)) in labels
        .iter()
        .zip(logits.data().chunks_exact(k))
        .enumerate()
    {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let lse = f64::from(max)
            + row
                .iter()
                .map(|&v| f64::from(v - max).exp())
                .sum::<f64>()
                .ln();
        loss += lse - f64::from(row[label]);
        grad.data_mut()[i * k + label] -= 1.0;
    }
    let inv_b = 1.0 / b as f32;
    grad.data_mut().iter_mut().for_each(|g| *g *= inv_b);
    Ok(CrossEntropy {
        loss: loss / b as f64,
        probs,
        grad,
    })
}
