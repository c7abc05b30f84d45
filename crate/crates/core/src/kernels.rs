//! Forward and backward numeric kernels over raw tensors.
//!
//! Storage is `f32`; every reduction accumulates in `f64` in a fixed loop
//! order so identical inputs give bit-identical outputs.

use crate::tensor::{mismatch, Result, Tensor};

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(mismatch("matmul", format!("[{m}x{k}] . [{k2}x{n}]")));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0f32; m * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for p in 0..k {
            let av = ad[i * k + p] as f64;
            let row = &bd[p * n..(p + 1) * n];
            for (s, &bv) in acc.iter_mut().zip(row) {
                *s += av * bv as f64;
            }
        }
        for (o, s) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = *s as f32;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul_nt")?;
    let (n, k2) = b.dims2("matmul_nt")?;
    if k != k2 {
        return Err(mismatch("matmul_nt", format!("[{m}x{k}] . [{n}x{k2}]^T")));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let ar = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let br = &bd[j * k..(j + 1) * k];
            let s: f64 = ar.iter().zip(br).map(|(x, y)| *x as f64 * *y as f64).sum();
            out[i * n + j] = s as f32;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `aᵀ · b` for `a: [k, m]`, `b: [k, n]`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = a.dims2("matmul_tn")?;
    let (k2, n) = b.dims2("matmul_tn")?;
    if k != k2 {
        return Err(mismatch("matmul_tn", format!("[{k}x{m}]^T . [{k2}x{n}]")));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut acc = vec![0.0f64; m * n];
    for p in 0..k {
        let brow = &bd[p * n..(p + 1) * n];
        for i in 0..m {
            let av = ad[p * m + i] as f64;
            for (s, &bv) in acc[i * n..(i + 1) * n].iter_mut().zip(brow) {
                *s += av * bv as f64;
            }
        }
    }
    Tensor::new(vec![m, n], acc.into_iter().map(|v| v as f32).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Result<Self> {
        let (batch, c_in, h, wd) = x.dims4("conv2d")?;
        let (c_out, c_in2, kh, kw) = w.dims4("conv2d")?;
        if c_in != c_in2 {
            return Err(mismatch(
                "conv2d",
                format!("input has {c_in} channels, kernel expects {c_in2}"),
            ));
        }
        if stride == 0 {
            return Err(mismatch("conv2d", "stride must be positive"));
        }
        if kh > h + 2 * padding || kw > wd + 2 * padding || kh == 0 || kw == 0 {
            return Err(mismatch(
                "conv2d",
                format!("kernel {kh}x{kw} does not fit {h}x{wd} with padding {padding}"),
            ));
        }
        Ok(Self {
            batch,
            c_in,
            h,
            w: wd,
            c_out,
            kh,
            kw,
            stride,
            padding,
            h_out: (h + 2 * padding - kh) / stride + 1,
            w_out: (wd + 2 * padding - kw) / stride + 1,
        })
    }

    fn rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Source pixel for patch row `r` at output position `q`, if inside the image.
    #[inline]
    fn source(&self, r: usize, q: usize) -> Option<usize> {
        let ci = r / (self.kh * self.kw);
        let ki = (r / self.kw) % self.kh;
        let kj = r % self.kw;
        let oh = q / self.w_out;
        let ow = q % self.w_out;
        let ih = (oh * self.stride + ki) as isize - self.padding as isize;
        let iw = (ow * self.stride + kj) as isize - self.padding as isize;
        if ih < 0 || iw < 0 || ih >= self.h as isize || iw >= self.w as isize {
            None
        } else {
            Some((ci * self.h + ih as usize) * self.w + iw as usize)
        }
    }

    fn im2col(&self, sample: &[f32], cols: &mut [f32]) {
        let nq = self.cols();
        for r in 0..self.rows() {
            for q in 0..nq {
                cols[r * nq + q] = self.source(r, q).map_or(0.0, |i| sample[i]);
            }
        }
    }
}

/// Cross-correlation with zero padding. `x: [b, Ci, H, W]`, `w: [Co, Ci, kH, kW]`.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = ConvGeom::new(x, w, stride, padding)?;
    let (nr, nq) = (g.rows(), g.cols());
    let in_stride = g.c_in * g.h * g.w;
    let out_stride = g.c_out * nq;
    let mut out = vec![0.0f32; g.batch * out_stride];
    let mut cols = vec![0.0f32; nr * nq];
    let mut acc = vec![0.0f64; nq];
    let wd = w.data();
    for n in 0..g.batch {
        g.im2col(&x.data()[n * in_stride..(n + 1) * in_stride], &mut cols);
        for co in 0..g.c_out {
            acc.iter_mut().for_each(|v| *v = 0.0);
            for r in 0..nr {
                let wv = wd[co * nr + r] as f64;
                if wv == 0.0 {
                    continue;
                }
                for (s, &c) in acc.iter_mut().zip(&cols[r * nq..(r + 1) * nq]) {
                    *s += wv * c as f64;
                }
            }
            let base = n * out_stride + co * nq;
            for (o, s) in out[base..base + nq].iter_mut().zip(&acc) {
                *o = *s as f32;
            }
        }
    }
    Tensor::new(vec![g.batch, g.c_out, g.h_out, g.w_out], out)
}

/// Gradients of `conv2d` with respect to the input and/or the kernel.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    grad_out: &[f64],
    stride: usize,
    padding: usize,
    need_x: bool,
    need_w: bool,
) -> Result<(Option<Vec<f64>>, Option<Vec<f64>>)> {
    let g = ConvGeom::new(x, w, stride, padding)?;
    let (nr, nq) = (g.rows(), g.cols());
    let in_stride = g.c_in * g.h * g.w;
    let out_stride = g.c_out * nq;
    let wd = w.data();
    let mut dx = need_x.then(|| vec![0.0f64; x.len()]);
    let mut dw = need_w.then(|| vec![0.0f64; w.len()]);
    let mut cols = vec![0.0f32; nr * nq];
    let mut dcol = vec![0.0f64; nq];
    for n in 0..g.batch {
        let go = &grad_out[n * out_stride..(n + 1) * out_stride];
        if let Some(dw) = dw.as_mut() {
            g.im2col(&x.data()[n * in_stride..(n + 1) * in_stride], &mut cols);
            for co in 0..g.c_out {
                let gr = &go[co * nq..(co + 1) * nq];
                for r in 0..nr {
                    let s: f64 = gr
                        .iter()
                        .zip(&cols[r * nq..(r + 1) * nq])
                        .map(|(a, &c)| a * c as f64)
                        .sum();
                    dw[co * nr + r] += s;
                }
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[n * in_stride..(n + 1) * in_stride];
            for r in 0..nr {
                dcol.iter_mut().for_each(|v| *v = 0.0);
                for co in 0..g.c_out {
                    let wv = wd[co * nr + r] as f64;
                    if wv == 0.0 {
                        continue;
                    }
                    for (d, a) in dcol.iter_mut().zip(&go[co * nq..(co + 1) * nq]) {
                        *d += wv * a;
                    }
                }
                for (q, d) in dcol.iter().enumerate() {
                    if let Some(i) = g.source(r, q) {
                        dxs[i] += d;
                    }
                }
            }
        }
    }
    Ok((dx, dw))
}

/// Non-overlapping average pooling with a square window of side `k`.
pub fn avgpool2d(x: &Tensor, k: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4("avgpool2d")?;
    if k == 0 || k > h || k > w {
        return Err(mismatch("avgpool2d", format!("window {k} on {h}x{w}")));
    }
    let (ho, wo) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    let xd = x.data();
    let mut out = Vec::with_capacity(b * c * ho * wo);
    for plane in 0..b * c {
        let p = &xd[plane * h * w..(plane + 1) * h * w];
        for oi in 0..ho {
            for oj in 0..wo {
                let mut s = 0.0f64;
                for di in 0..k {
                    for dj in 0..k {
                        s += p[(oi * k + di) * w + oj * k + dj] as f64;
                    }
                }
                out.push((s * inv) as f32);
            }
        }
    }
    Tensor::new(vec![b, c, ho, wo], out)
}

pub fn avgpool2d_backward(shape: &[usize], k: usize, grad_out: &[f64]) -> Vec<f64> {
    let (h, w) = (shape[2], shape[3]);
    let (ho, wo) = (h / k, w / k);
    let planes = shape[0] * shape[1];
    let inv = 1.0 / (k * k) as f64;
    let mut dx = vec![0.0f64; planes * h * w];
    for plane in 0..planes {
        for oi in 0..ho {
            for oj in 0..wo {
                let g = grad_out[(plane * ho + oi) * wo + oj] * inv;
                for di in 0..k {
                    for dj in 0..k {
                        dx[plane * h * w + (oi * k + di) * w + oj * k + dj] += g;
                    }
                }
            }
        }
    }
    dx
}

/// Row-wise log-softmax of `[n, k]` logits.
pub fn log_softmax(x: &Tensor) -> Result<Tensor> {
    let (n, k) = x.dims2("log_softmax")?;
    let mut out = Vec::with_capacity(n * k);
    for row in x.data().chunks(k.max(1)).take(n) {
        let mx = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
        let lse = mx + row.iter().map(|&v| (v as f64 - mx).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|&v| (v as f64 - lse) as f32));
    }
    Tensor::new(vec![n, k], out)
}

pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let (n, k) = x.dims2("softmax")?;
    let mut out = Vec::with_capacity(n * k);
    for row in x.data().chunks(k.max(1)).take(n) {
        let mx = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
        let e: Vec<f64> = row.iter().map(|&v| (v as f64 - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| (v / z) as f32));
    }
    Tensor::new(vec![n, k], out)
}

/// Per-sample, per-channel spatial mean and population variance (divisor `H·W`).
/// Returns `(m, d2)`, each `[b, C]`.
pub fn channel_stats(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let (b, c, h, w) = x.dims4("channel_stats")?;
    let hw = h * w;
    if hw == 0 {
        return Err(mismatch("channel_stats", "empty feature map"));
    }
    let mut m = Vec::with_capacity(b * c);
    let mut d2 = Vec::with_capacity(b * c);
    for plane in x.data().chunks(hw) {
        let (mean, var) = mean_var(plane);
        m.push(mean as f32);
        d2.push(var as f32);
    }
    Ok((Tensor::new(vec![b, c], m)?, Tensor::new(vec![b, c], d2)?))
}

/// Two-pass mean and population variance of a slice.
pub(crate) fn mean_var(v: &[f32]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v
        .iter()
        .map(|&x| {
            let d = x as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    (mean, var)
}

/// Per-channel batch mean and population variance over `b·H·W` positions.
pub fn batch_stats(x: &Tensor) -> Result<(Vec<f32>, Vec<f32>)> {
    let (b, c, h, w) = x.dims4("batch_stats")?;
    let hw = h * w;
    if b * hw == 0 {
        return Err(mismatch("batch_stats", "empty batch"));
    }
    let count = (b * hw) as f64;
    let xd = x.data();
    let mut means = Vec::with_capacity(c);
    let mut vars = Vec::with_capacity(c);
    for ch in 0..c {
        let planes = (0..b).map(|n| &xd[(n * c + ch) * hw..(n * c + ch + 1) * hw]);
        let mean = planes
            .clone()
            .flat_map(|p| p.iter())
            .map(|&v| v as f64)
            .sum::<f64>()
            / count;
        let var = planes
            .flat_map(|p| p.iter())
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / count;
        means.push(mean as f32);
        vars.push(var as f32);
    }
    Ok((means, vars))
}

/// `(x - mean) / sqrt(var + eps)` per channel.
pub fn normalize(x: &Tensor, mean: &[f32], var: &[f32], eps: f32) -> Result<Tensor> {
    let (_, c, h, w) = x.dims4("normalize")?;
    if mean.len() != c || var.len() != c {
        return Err(mismatch(
            "normalize",
            format!("{c} channels vs {} statistics", mean.len()),
        ));
    }
    let hw = h * w;
    let scale: Vec<f64> = var.iter().map(|&v| 1.0 / (v as f64 + eps as f64).sqrt()).collect();
    let mut out = x.clone();
    for (i, plane) in out.data_mut().chunks_mut(hw).enumerate() {
        let ch = i % c;
        let (mu, s) = (mean[ch] as f64, scale[ch]);
        for v in plane {
            *v = ((*v as f64 - mu) * s) as f32;
        }
    }
    Ok(out)
}

/// `gamma · x + beta` per channel.
pub fn channel_affine(x: &Tensor, gamma: &[f32], beta: &[f32]) -> Result<Tensor> {
    let (_, c, h, w) = x.dims4("channel_affine")?;
    if gamma.len() != c || beta.len() != c {
        return Err(mismatch(
            "channel_affine",
            format!("{c} channels vs {} affine parameters", gamma.len()),
        ));
    }
    let hw = h * w;
    let mut out = x.clone();
    for (i, plane) in out.data_mut().chunks_mut(hw).enumerate() {
        let ch = i % c;
        let (g, b) = (gamma[ch] as f64, beta[ch] as f64);
        for v in plane {
            *v = (g * *v as f64 + b) as f32;
        }
    }
    Ok(out)
}
