//! Independent reference implementations used by the test suites: a
//! direct-definition convolution, central finite differences, and direct
//! formula evaluations. Nothing here shares code with the kernels it checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{ops, BatchNorm2d, Conv2d, Linear, Tensor};

/// Textbook cross-correlation with zero padding, accumulated in `f64`.
pub fn direct_conv2d(input: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Tensor {
    let s = input.shape();
    let (b, cin, h, w) = (s[0], s[1], s[2], s[3]);
    let ws = weight.shape();
    let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    let x = |n: usize, c: usize, i: isize, j: isize| -> f64 {
        if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
            0.0
        } else {
            f64::from(input.data()[((n * cin + c) * h + i as usize) * w + j as usize])
        }
    };
    let mut out = vec![0.0f32; b * cout * oh * ow];
    for n in 0..b {
        for o in 0..cout {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = 0.0f64;
                    for c in 0..cin {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride + i) as isize - padding as isize;
                                let ix = (xo * stride + j) as isize - padding as isize;
                                let wv = weight.data()[((o * cin + c) * kh + i) * kw + j];
                                acc += x(n, c, iy, ix) * f64::from(wv);
                            }
                        }
                    }
                    out[((n * cout + o) * oh + y) * ow + xo] = acc as f32;
                }
            }
        }
    }
    Tensor::new(vec![b, cout, oh, ow], out).expect("oracle shape")
}

/// `-(1/B) sum log softmax(logits)[label]` in `f64`, written from the formula.
pub fn direct_cross_entropy(logits: &[f64], classes: usize, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &label) in logits.chunks_exact(classes).zip(labels) {
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        total -= (row[label].exp() / z).ln();
    }
    total / labels.len() as f64
}

/// Central differences of `loss` around `x`, with step `rel_step * max(1, |x_i|)`.
pub fn central_difference(
    x: &[f32],
    rel_step: f32,
    mut loss: impl FnMut(&[f32]) -> f64,
) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = rel_step * x[i].abs().max(1.0);
            probe[i] = x[i] + h;
            let up = loss(&probe);
            probe[i] = x[i] - h;
            let down = loss(&probe);
            probe[i] = x[i];
            // use the step actually representable in f32
            let span = f64::from(x[i] + h) - f64::from(x[i] - h);
            (up - down) / span
        })
        .collect()
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        0.0
    } else {
        diff / scale
    }
}

fn project(y: &Tensor, r: &[f32]) -> f64 {
    y.data()
        .iter()
        .zip(r)
        .map(|(&a, &b)| f64::from(a) * f64::from(b))
        .sum()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| f64::from(v)).collect()
}

/// One analytic-vs-finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCase {
    pub op: &'static str,
    pub shape: Vec<usize>,
    pub rel_err: f64,
}

const STEP: f32 = 1e-3;

fn conv_case(rng: &mut ChaCha8Rng) -> GradCase {
    let k = if rng.random_bool(0.5) { 3 } else { 1 };
    let stride = rng.random_range(1..=2);
    let padding = rng.random_range(0..=1);
    let b = rng.random_range(1..=2);
    let cin = rng.random_range(1..=3);
    let cout = rng.random_range(1..=3);
    let h = rng.random_range(k.max(3)..=6);
    let w = rng.random_range(k.max(3)..=6);
    let x = random_tensor(rng, &[b, cin, h, w]);
    let wt = random_tensor(rng, &[cout, cin, k, k]);
    let mut conv = Conv2d::from_weight("gc", wt.clone(), stride, padding);
    let y = conv.forward_train(&x).expect("conv forward");
    let r = random_tensor(rng, y.shape());
    let gi = conv.backward(&r).expect("conv backward");
    let fd_x = central_difference(x.data(), STEP, |v| {
        let xi = Tensor::new(x.shape().to_vec(), v.to_vec()).unwrap();
        project(&ops::conv2d(&xi, &wt, stride, padding).unwrap(), r.data())
    });
    let fd_w = central_difference(wt.data(), STEP, |v| {
        let wi = Tensor::new(wt.shape().to_vec(), v.to_vec()).unwrap();
        project(&ops::conv2d(&x, &wi, stride, padding).unwrap(), r.data())
    });
    let mut analytic = to_f64(&gi);
    analytic.extend(to_f64(&conv.weight.grad));
    let mut numeric = fd_x;
    numeric.extend(fd_w);
    GradCase {
        op: "conv2d",
        shape: x.shape().to_vec(),
        rel_err: relative_error(&analytic, &numeric),
    }
}

fn batchnorm_case(rng: &mut ChaCha8Rng, train: bool) -> GradCase {
    let b = rng.random_range(2..=3);
    let c = rng.random_range(1..=3);
    let h = rng.random_range(2..=4);
    let x = random_tensor(rng, &[b, c, h, h]);
    let gamma = Tensor::from_fn(&[c], |_| rng.random_range(0.5..1.5));
    let beta = random_tensor(rng, &[c]);
    let make = |g: &Tensor, be: &Tensor| {
        let mut bn = BatchNorm2d::initialized("gc", c);
        bn.gamma.value = g.clone();
        bn.beta.value = be.clone();
        if !train {
            // arbitrary but fixed running statistics
            bn.set_running_stats(
                Tensor::from_fn(&[c], |i| 0.1 * i as f32),
                Tensor::from_fn(&[c], |i| 0.5 + 0.2 * i as f32),
            );
        }
        bn
    };
    let run = |bn: &mut BatchNorm2d, x: &Tensor| {
        if train {
            bn.forward_train(x).unwrap()
        } else {
            bn.forward_eval_train(x).unwrap()
        }
    };
    let mut bn = make(&gamma, &beta);
    let y = run(&mut bn, &x);
    let r = random_tensor(rng, y.shape());
    let gi = bn.backward(&r).unwrap();
    let fd_x = central_difference(x.data(), STEP, |v| {
        let xi = Tensor::new(x.shape().to_vec(), v.to_vec()).unwrap();
        project(&run(&mut make(&gamma, &beta), &xi), r.data())
    });
    let fd_g = central_difference(gamma.data(), STEP, |v| {
        let gi = Tensor::new(gamma.shape().to_vec(), v.to_vec()).unwrap();
        project(&run(&mut make(&gi, &beta), &x), r.data())
    });
    let fd_b = central_difference(beta.data(), STEP, |v| {
        let bi = Tensor::new(beta.shape().to_vec(), v.to_vec()).unwrap();
        project(&run(&mut make(&gamma, &bi), &x), r.data())
    });
    let mut analytic = to_f64(&gi);
    analytic.extend(to_f64(&bn.gamma.grad));
    analytic.extend(to_f64(&bn.beta.grad));
    let numeric: Vec<f64> = fd_x.into_iter().chain(fd_g).chain(fd_b).collect();
    GradCase {
        op: if train { "batchnorm_train" } else { "batchnorm_eval" },
        shape: x.shape().to_vec(),
        rel_err: relative_error(&analytic, &numeric),
    }
}

fn relu_case(rng: &mut ChaCha8Rng) -> GradCase {
    let shape = [rng.random_range(1..=2), rng.random_range(1..=4), 4, 4];
    // keep every entry away from the kink by more than the FD step
    let x = Tensor::from_fn(&shape, |_| {
        let v: f32 = rng.random_range(0.01..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    });
    let y = ops::relu(&x);
    let r = random_tensor(rng, y.shape());
    let gi = ops::relu_backward(&y, &r).unwrap();
    let fd = central_difference(x.data(), STEP, |v| {
        let xi = Tensor::new(shape.to_vec(), v.to_vec()).unwrap();
        project(&ops::relu(&xi), r.data())
    });
    GradCase {
        op: "relu",
        shape: shape.to_vec(),
        rel_err: relative_error(&to_f64(&gi), &fd),
    }
}

fn avgpool_case(rng: &mut ChaCha8Rng) -> GradCase {
    let k = rng.random_range(1..=3);
    let h = rng.random_range(k..=8);
    let w = rng.random_range(k..=8);
    let shape = [rng.random_range(1..=2), rng.random_range(1..=3), h, w];
    let x = random_tensor(rng, &shape);
    let y = ops::avg_pool2d(&x, k).unwrap();
    let r = random_tensor(rng, y.shape());
    let gi = ops::avg_pool2d_backward(&shape, k, &r).unwrap();
    let fd = central_difference(x.data(), STEP, |v| {
        let xi = Tensor::new(shape.to_vec(), v.to_vec()).unwrap();
        project(&ops::avg_pool2d(&xi, k).unwrap(), r.data())
    });
    GradCase {
        op: "avg_pool2d",
        shape: shape.to_vec(),
        rel_err: relative_error(&to_f64(&gi), &fd),
    }
}

fn global_pool_case(rng: &mut ChaCha8Rng) -> GradCase {
    let shape = [
        rng.random_range(1..=2),
        rng.random_range(1..=4),
        rng.random_range(1..=8),
        rng.random_range(1..=8),
    ];
    let x = random_tensor(rng, &shape);
    let y = ops::global_avg_pool(&x).unwrap();
    let r = random_tensor(rng, y.shape());
    let gi = ops::global_avg_pool_backward(&shape, &r).unwrap();
    let fd = central_difference(x.data(), STEP, |v| {
        let xi = Tensor::new(shape.to_vec(), v.to_vec()).unwrap();
        project(&ops::global_avg_pool(&xi).unwrap(), r.data())
    });
    GradCase {
        op: "global_avg_pool",
        shape: shape.to_vec(),
        rel_err: relative_error(&to_f64(&gi), &fd),
    }
}

fn linear_case(rng: &mut ChaCha8Rng) -> GradCase {
    let (b, inf, outf) = (
        rng.random_range(1..=4),
        rng.random_range(1..=8),
        rng.random_range(1..=8),
    );
    let x = random_tensor(rng, &[b, inf]);
    let wt = random_tensor(rng, &[outf, inf]);
    let bias = random_tensor(rng, &[outf]);
    let mut lin = Linear::from_parts("gc", wt.clone(), bias.clone());
    let y = lin.forward_train(&x).unwrap();
    let r = random_tensor(rng, y.shape());
    let gi = lin.backward(&r).unwrap();
    let fd_x = central_difference(x.data(), STEP, |v| {
        let xi = Tensor::new(vec![b, inf], v.to_vec()).unwrap();
        project(&ops::linear(&xi, &wt, &bias).unwrap(), r.data())
    });
    let fd_w = central_difference(wt.data(), STEP, |v| {
        let wi = Tensor::new(vec![outf, inf], v.to_vec()).unwrap();
        project(&ops::linear(&x, &wi, &bias).unwrap(), r.data())
    });
    let fd_b = central_difference(bias.data(), STEP, |v| {
        let bi = Tensor::new(vec![outf], v.to_vec()).unwrap();
        project(&ops::linear(&x, &wt, &bi).unwrap(), r.data())
    });
    let mut analytic = to_f64(&gi);
    analytic.extend(to_f64(&lin.weight.grad));
    analytic.extend(to_f64(&lin.bias.grad));
    let numeric: Vec<f64> = fd_x.into_iter().chain(fd_w).chain(fd_b).collect();
    GradCase {
        op: "linear",
        shape: vec![b, inf, outf],
        rel_err: relative_error(&analytic, &numeric),
    }
}

fn concat_case(rng: &mut ChaCha8Rng) -> GradCase {
    let (b, h, w) = (rng.random_range(1..=2), rng.random_range(1..=4), rng.random_range(1..=4));
    let c1 = rng.random_range(1..=3);
    let c2 = rng.random_range(1..=3);
    let a = random_tensor(rng, &[b, c1, h, w]);
    let bt = random_tensor(rng, &[b, c2, h, w]);
    let y = ops::concat_channels(&[&a, &bt]).unwrap();
    let r = random_tensor(rng, y.shape());
    let ga = ops::slice_channels(&r, 0, c1).unwrap();
    let gb = ops::slice_channels(&r, c1, c2).unwrap();
    let fd_a = central_difference(a.data(), STEP, |v| {
        let ai = Tensor::new(a.shape().to_vec(), v.to_vec()).unwrap();
        project(&ops::concat_channels(&[&ai, &bt]).unwrap(), r.data())
    });
    let fd_b = central_difference(bt.data(), STEP, |v| {
        let bi = Tensor::new(bt.shape().to_vec(), v.to_vec()).unwrap();
        project(&ops::concat_channels(&[&a, &bi]).unwrap(), r.data())
    });
    let mut analytic = to_f64(&ga);
    analytic.extend(to_f64(&gb));
    let numeric: Vec<f64> = fd_a.into_iter().chain(fd_b).collect();
    GradCase {
        op: "concat_channels",
        shape: y.shape().to_vec(),
        rel_err: relative_error(&analytic, &numeric),
    }
}

fn cross_entropy_case(rng: &mut ChaCha8Rng) -> GradCase {
    let (b, k) = (rng.random_range(1..=6), rng.random_range(2..=10));
    let logits = random_tensor(rng, &[b, k]);
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
    let ce = ops::softmax_cross_entropy(&logits, &labels).unwrap();
    let fd = central_difference(logits.data(), STEP, |v| {
        let l: Vec<f64> = v.iter().map(|&x| f64::from(x)).collect();
        direct_cross_entropy(&l, k, &labels)
    });
    GradCase {
        op: "softmax_cross_entropy",
        shape: vec![b, k],
        rel_err: relative_error(&to_f64(&ce.grad), &fd),
    }
}

/// Randomized finite-difference checks over every differentiable op;
/// `rounds` cases per op (nine ops).
pub fn gradient_cases(seed: u64, rounds: usize) -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::with_capacity(rounds * 9);
    for _ in 0..rounds {
        cases.push(conv_case(&mut rng));
        cases.push(batchnorm_case(&mut rng, true));
        cases.push(batchnorm_case(&mut rng, false));
        cases.push(relu_case(&mut rng));
        cases.push(avgpool_case(&mut rng));
        cases.push(global_pool_case(&mut rng));
        cases.push(linear_case(&mut rng));
        cases.push(concat_case(&mut rng));
        cases.push(cross_entropy_case(&mut rng));
    }
    cases
}

/// One randomized conv configuration compared against [`direct_conv2d`].
#[derive(Clone, Debug)]
pub struct ConvCase {
    pub stride: usize,
    pub padding: usize,
    pub kernel: usize,
    pub max_abs_diff: f32,
}

/// Covers stride {1,2} x padding {0,1} x kernel {1,3}, cycling through the
/// eight combinations with random sizes.
pub fn conv_oracle_cases(seed: u64, count: usize) -> Vec<ConvCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let stride = 1 + (i & 1);
            let padding = (i >> 1) & 1;
            let kernel = if (i >> 2) & 1 == 1 { 3 } else { 1 };
            let b = rng.random_range(1..=3);
            let cin = rng.random_range(1..=5);
            let cout = rng.random_range(1..=5);
            let h = rng.random_range(kernel.max(2)..=8);
            let w = rng.random_range(kernel.max(2)..=8);
            let x = random_tensor(&mut rng, &[b, cin, h, w]);
            let wt = random_tensor(&mut rng, &[cout, cin, kernel, kernel]);
            let fast = ops::conv2d(&x, &wt, stride, padding).unwrap();
            let slow = direct_conv2d(&x, &wt, stride, padding);
            assert_eq!(fast.shape(), slow.shape());
            let max_abs_diff = fast
                .data()
                .iter()
                .zip(slow.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            ConvCase {
                stride,
                padding,
                kernel,
                max_abs_diff,
            }
        })
        .collect()
}
