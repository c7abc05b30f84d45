//! Independent f64 reference implementations used as test oracles. Everything
//! here is written as plain nested loops over explicit indices and shares no
//! code with the library kernels.

#![allow(dead_code)]

use datta::model::{BnLayerState, CapturePoint, Layer, ModelGraph};
use datta::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Dense `[b, c, h, w]` array in f64.
#[derive(Debug, Clone)]
pub struct A4 {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub d: Vec<f64>,
}

impl A4 {
    pub fn from_tensor(t: &Tensor) -> Self {
        let s = t.shape();
        assert_eq!(s.len(), 4);
        Self {
            b: s[0],
            c: s[1],
            h: s[2],
            w: s[3],
            d: t.data().iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn zeros(b: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            b,
            c,
            h,
            w,
            d: vec![0.0; b * c * h * w],
        }
    }

    pub fn at(&self, n: usize, c: usize, i: usize, j: usize) -> f64 {
        self.d[((n * self.c + c) * self.h + i) * self.w + j]
    }

    pub fn set(&mut self, n: usize, c: usize, i: usize, j: usize, v: f64) {
        let idx = ((n * self.c + c) * self.h + i) * self.w + j;
        self.d[idx] = v;
    }
}

pub fn random_tensor(shape: &[usize], lo: f32, hi: f32, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Six nested loops; weight `[out, in, k, k]`.
pub fn conv(x: &A4, weight: &Tensor, stride: usize, pad: usize) -> A4 {
    let s = weight.shape();
    let (co, ci, kh, kw) = (s[0], s[1], s[2], s[3]);
    assert_eq!(ci, x.c);
    let ho = (x.h + 2 * pad - kh) / stride + 1;
    let wo = (x.w + 2 * pad - kw) / stride + 1;
    let wd = weight.data();
    let mut y = A4::zeros(x.b, co, ho, wo);
    for n in 0..x.b {
        for o in 0..co {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for u in 0..kh {
                            for v in 0..kw {
                                let yi = (i * stride + u) as isize - pad as isize;
                                let xj = (j * stride + v) as isize - pad as isize;
                                if yi < 0 || xj < 0 || yi >= x.h as isize || xj >= x.w as isize {
                                    continue;
                                }
                                let wv = wd[((o * ci + c) * kh + u) * kw + v] as f64;
                                acc += wv * x.at(n, c, yi as usize, xj as usize);
                            }
                        }
                    }
                    y.set(n, o, i, j, acc);
                }
            }
        }
    }
    y
}

/// Per-sample spatial mean and population variance, `[b][c]`.
pub fn sample_channel_stats(x: &A4) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let hw = (x.h * x.w) as f64;
    let mut m = vec![vec![0.0; x.c]; x.b];
    let mut d2 = vec![vec![0.0; x.c]; x.b];
    for n in 0..x.b {
        for c in 0..x.c {
            let mut s = 0.0;
            for i in 0..x.h {
                for j in 0..x.w {
                    s += x.at(n, c, i, j);
                }
            }
            let mean = s / hw;
            let mut v = 0.0;
            for i in 0..x.h {
                for j in 0..x.w {
                    v += (x.at(n, c, i, j) - mean).powi(2);
                }
            }
            m[n][c] = mean;
            d2[n][c] = v / hw;
        }
    }
    (m, d2)
}

/// Per-channel mean and population variance over batch and space.
pub fn batch_stats(x: &A4) -> (Vec<f64>, Vec<f64>) {
    let cnt = (x.b * x.h * x.w) as f64;
    let mut mean = vec![0.0; x.c];
    let mut var = vec![0.0; x.c];
    for c in 0..x.c {
        let mut s = 0.0;
        for n in 0..x.b {
            for i in 0..x.h {
                for j in 0..x.w {
                    s += x.at(n, c, i, j);
                }
            }
        }
        mean[c] = s / cnt;
        let mut v = 0.0;
        for n in 0..x.b {
            for i in 0..x.h {
                for j in 0..x.w {
                    v += (x.at(n, c, i, j) - mean[c]).powi(2);
                }
            }
        }
        var[c] = v / cnt;
    }
    (mean, var)
}

pub fn normalize(x: &A4, mean: &[f64], var: &[f64], eps: f64) -> A4 {
    let mut y = x.clone();
    for n in 0..x.b {
        for c in 0..x.c {
            let inv = 1.0 / (var[c] + eps).sqrt();
            for i in 0..x.h {
                for j in 0..x.w {
                    y.set(n, c, i, j, (x.at(n, c, i, j) - mean[c]) * inv);
                }
            }
        }
    }
    y
}

pub fn affine(x: &A4, gamma: &[f64], beta: &[f64]) -> A4 {
    let mut y = x.clone();
    for n in 0..x.b {
        for c in 0..x.c {
            for i in 0..x.h {
                for j in 0..x.w {
                    y.set(n, c, i, j, gamma[c] * x.at(n, c, i, j) + beta[c]);
                }
            }
        }
    }
    y
}

pub fn batch_avg(per_sample: &[Vec<f64>]) -> Vec<f64> {
    let b = per_sample.len() as f64;
    let c = per_sample[0].len();
    (0..c).map(|j| per_sample.iter().map(|r| r[j]).sum::<f64>() / b).collect()
}

pub fn softmax_row(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Sum over samples whose max probability exceeds `theta` of the Shannon entropy.
pub fn em_loss(logits: &[Vec<f64>], theta: f64) -> (f64, usize) {
    let mut total = 0.0;
    let mut n = 0;
    for row in logits {
        let p = softmax_row(row);
        let max = p.iter().cloned().fold(0.0, f64::max);
        if max > theta {
            n += 1;
            total -= p.iter().map(|&q| if q > 0.0 { q * q.ln() } else { 0.0 }).sum::<f64>();
        }
    }
    (total, n)
}

/// Mean over layers of `(1/C) * sum_j (|m - m_ref| + |d2 - d2_ref|)`.
pub fn da_loss(captured: &[(Vec<f64>, Vec<f64>)], reference: &[(Vec<f64>, Vec<f64>)]) -> f64 {
    assert_eq!(captured.len(), reference.len());
    let mut total = 0.0;
    for ((m, d2), (mr, d2r)) in captured.iter().zip(reference) {
        let c = m.len() as f64;
        let mut s = 0.0;
        for j in 0..m.len() {
            s += (m[j] - mr[j]).abs() + (d2[j] - d2r[j]).abs();
        }
        total += s / c;
    }
    total / captured.len() as f64
}

#[derive(Debug, Clone)]
pub struct OracleForward {
    /// `[b][classes]`
    pub logits: Vec<Vec<f64>>,
    /// Batch-averaged `(m, d2)` per BN layer, in BN order.
    pub captured: Vec<(Vec<f64>, Vec<f64>)>,
    /// Batch mean and variance of every BN layer's input.
    pub bn_input_stats: Vec<(Vec<f64>, Vec<f64>)>,
}

/// Forward pass of `model` in f64 with BN affine parameters taken from
/// `affine` (one `(gamma, beta)` per BN layer). BN layers use their stored
/// normalization statistics or, in batch mode, the current batch's.
pub fn forward(model: &ModelGraph, affine: &[(Vec<f64>, Vec<f64>)], x: &Tensor, point: CapturePoint) -> OracleForward {
    forward_masked(model, affine, x, point, None).0
}

/// As [`forward`], optionally with every ReLU's on/off pattern frozen to
/// `masks` (one entry per ReLU, in order). Returns the patterns in effect.
/// Freezing the pattern evaluates the smooth piece the base point lies on,
/// which is what a finite difference must probe when it would otherwise
/// straddle a ReLU kink.
pub fn forward_masked(
    model: &ModelGraph,
    affine: &[(Vec<f64>, Vec<f64>)],
    x: &Tensor,
    point: CapturePoint,
    masks: Option<&[Vec<bool>]>,
) -> (OracleForward, Vec<Vec<bool>>) {
    let mut used = Vec::new();
    let mut a = A4::from_tensor(x);
    let mut flat: Option<Vec<Vec<f64>>> = None;
    let mut captured = Vec::new();
    let mut bn_input_stats = Vec::new();
    let mut bn_idx = 0;
    for layer in model.layers() {
        match layer {
            Layer::Conv { weight, stride, padding } => a = conv(&a, weight, *stride, *padding),
            Layer::BatchNorm(st) => {
                let (g, b) = &affine[bn_idx];
                bn_input_stats.push(batch_stats(&a));
                let xhat = bn_normalize(&a, st);
                let y = affine_apply(&xhat, g, b);
                let src = match point {
                    CapturePoint::PostAffine => &y,
                    CapturePoint::PostNormalize => &xhat,
                };
                let (m, d2) = sample_channel_stats(src);
                captured.push((batch_avg(&m), batch_avg(&d2)));
                a = y;
                bn_idx += 1;
            }
            Layer::Relu => {
                let vals: Vec<&mut f64> = match flat.as_mut() {
                    Some(f) => f.iter_mut().flat_map(|r| r.iter_mut()).collect(),
                    None => a.d.iter_mut().collect(),
                };
                let mask: Vec<bool> = match masks {
                    Some(m) => m[used.len()].clone(),
                    None => vals.iter().map(|v| **v > 0.0).collect(),
                };
                for (v, &on) in vals.into_iter().zip(&mask) {
                    if !on {
                        *v = 0.0;
                    }
                }
                used.push(mask);
            }
            Layer::AvgPool { kernel } => a = avgpool(&a, *kernel),
            Layer::Flatten => {
                let per = a.c * a.h * a.w;
                flat = Some((0..a.b).map(|n| a.d[n * per..(n + 1) * per].to_vec()).collect());
            }
            Layer::Linear { weight, bias } => {
                let f = flat.as_ref().expect("flatten before linear");
                let (i_dim, o_dim) = (weight.shape()[0], weight.shape()[1]);
                let wd = weight.data();
                let out: Vec<Vec<f64>> = f
                    .iter()
                    .map(|row| {
                        (0..o_dim)
                            .map(|o| {
                                let mut s = bias.data()[o] as f64;
                                for i in 0..i_dim {
                                    s += row[i] * wd[i * o_dim + o] as f64;
                                }
                                s
                            })
                            .collect()
                    })
                    .collect();
                flat = Some(out);
            }
        }
    }
    (
        OracleForward {
            logits: flat.expect("model ends in a linear layer"),
            captured,
            bn_input_stats,
        },
        used,
    )
}

fn affine_apply(x: &A4, g: &[f64], b: &[f64]) -> A4 {
    affine(x, g, b)
}

pub fn bn_normalize(x: &A4, st: &BnLayerState) -> A4 {
    let eps = st.epsilon as f64;
    match st.mode {
        datta::model::BnMode::FixedStats => {
            let mu: Vec<f64> = st.mu_norm.iter().map(|&v| v as f64).collect();
            let var: Vec<f64> = st.sigma2_norm.iter().map(|&v| v as f64).collect();
            normalize(x, &mu, &var, eps)
        }
        datta::model::BnMode::BatchStats => {
            let (mu, var) = batch_stats(x);
            normalize(x, &mu, &var, eps)
        }
    }
}

pub fn avgpool(x: &A4, k: usize) -> A4 {
    let (ho, wo) = (x.h / k, x.w / k);
    let mut y = A4::zeros(x.b, x.c, ho, wo);
    for n in 0..x.b {
        for c in 0..x.c {
            for i in 0..ho {
                for j in 0..wo {
                    let mut s = 0.0;
                    for u in 0..k {
                        for v in 0..k {
                            s += x.at(n, c, i * k + u, j * k + v);
                        }
                    }
                    y.set(n, c, i, j, s / (k * k) as f64);
                }
            }
        }
    }
    y
}

pub fn affine_f64(model: &ModelGraph) -> Vec<(Vec<f64>, Vec<f64>)> {
    model
        .bn_layers()
        .map(|b| {
            (
                b.gamma.iter().map(|&v| v as f64).collect(),
                b.beta.iter().map(|&v| v as f64).collect(),
            )
        })
        .collect()
}

/// Randomize BN affine parameters and population statistics so tests do
/// not sit at the identity initialization.
pub fn perturb_bn(model: &mut ModelGraph, rng: &mut impl Rng) {
    for bn in model.bn_layers_mut() {
        for v in bn.gamma.iter_mut() {
            *v = rng.random_range(0.6..1.4);
        }
        for v in bn.beta.iter_mut() {
            *v = rng.random_range(-0.3..0.3);
        }
        for v in bn.mu_popu.iter_mut() {
            *v = rng.random_range(-0.2..0.2);
        }
        for v in bn.sigma2_popu.iter_mut() {
            *v = rng.random_range(0.3..1.5);
        }
        bn.use_population();
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, &y)| (x - y as f64).abs()).fold(0.0, f64::max)
}
