//! Tape-based reverse-mode differentiation over a closed set of ops.
//!
//! Nodes are appended in evaluation order, so the tape itself is a
//! topological order and `backward` is a single reverse sweep. Gradient
//! buffers are `f64`.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::kernels;
use crate::tensor::{mismatch, Result, Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    AddRowBias(usize, usize),
    Conv2d {
        x: usize,
        w: usize,
        stride: usize,
        padding: usize,
    },
    Relu(usize),
    AvgPool(usize, usize),
    Reshape(usize),
    Softmax(usize),
    LogSoftmax(usize),
    Log(usize),
    Exp(usize),
    ChannelMean(usize),
    ChannelVar(usize),
    NormalizeFixed(usize, Vec<f64>),
    NormalizeBatch(usize, Vec<f64>),
    ChannelAffine(usize, usize, usize),
    MeanAxis0(usize),
    SubConst(usize),
    Abs(usize),
    Mean(usize),
    Sum(usize),
    SumRows(usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MaskRows(usize, Vec<bool>),
    CrossEntropy(usize, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(TensorError::ForeignVariable);
        }
        Ok(v.idx)
    }

    fn push(&mut self, value: Tensor, op: Op, op_name: &'static str) -> Result<Var> {
        let value = value.check_finite(op_name)?;
        let requires_grad = match &op {
            Op::Leaf => unreachable!("leaves are pushed via leaf()"),
            op => op_inputs(op).iter().any(|&i| self.nodes[i].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        })
    }

    /// Record an input. Gradients are only tracked through leaves with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        let value = value.check_finite("leaf")?;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        })
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.idx(v).expect("variable from another tape")].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let y = kernels::matmul(&self.nodes[ia].value, &self.nodes[ib].value)?;
        self.push(y, Op::MatMul(ia, ib), "matmul")
    }

    /// `x: [n, k]` plus a broadcast `bias: [k]`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (ix, ib) = (self.idx(x)?, self.idx(bias)?);
        let xv = &self.nodes[ix].value;
        let (_, k) = xv.dims2("add_row_bias")?;
        let bv = &self.nodes[ib].value;
        if bv.len() != k {
            return Err(mismatch("add_row_bias", format!("{k} columns vs bias {}", bv.len())));
        }
        let mut y = xv.clone();
        for row in y.data_mut().chunks_mut(k) {
            for (v, b) in row.iter_mut().zip(bv.data()) {
                *v += b;
            }
        }
        self.push(y, Op::AddRowBias(ix, ib), "add_row_bias")
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (ix, iw) = (self.idx(x)?, self.idx(w)?);
        let y = kernels::conv2d(&self.nodes[ix].value, &self.nodes[iw].value, stride, padding)?;
        self.push(
            y,
            Op::Conv2d {
                x: ix,
                w: iw,
                stride,
                padding,
            },
            "conv2d",
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let y = self.nodes[ix].value.map(|v| v.max(0.0));
        self.push(y, Op::Relu(ix), "relu")
    }

    pub fn avgpool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let y = kernels::avgpool2d(&self.nodes[ix].value, k)?;
        self.push(y, Op::AvgPool(ix, k), "avgpool2d")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.idx(x)?;
        let y = self.nodes[ix].value.clone().reshape(shape)?;
        self.push(y, Op::Reshape(ix), "reshape")
    }

    /// Collapse every axis after the first.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let b = shape.first().copied().unwrap_or(1);
        let rest = shape.iter().skip(1).product();
        self.reshape(x, &[b, rest])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let y = kernels::softmax(&self.nodes[ix].value)?;
        self.push(y, Op::Softmax(ix), "softmax")
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let y = kernels::log_softmax(&self.nodes[ix].value)?;
        self.push(y, Op::LogSoftmax(ix), "log_softmax")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let y = self.nodes[ix].value.map(f32::ln);
        self.push(y, Op::Log(ix), "log")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let y = self.nodes[ix].value.map(f32::exp);
        self.push(y, Op::Exp(ix), "exp")
    }

    /// Per-sample spatial channel means, `[b, C, H, W] -> [b, C]`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let (m, _) = kernels::channel_stats(&self.nodes[ix].value)?;
        self.push(m, Op::ChannelMean(ix), "channel_mean")
    }

    /// Per-sample spatial channel variances (divisor `H·W`), `[b, C, H, W] -> [b, C]`.
    pub fn channel_var(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let (_, d2) = kernels::channel_stats(&self.nodes[ix].value)?;
        self.push(d2, Op::ChannelVar(ix), "channel_var")
    }

    /// Normalize with fixed per-channel statistics (treated as constants).
    pub fn normalize_fixed(&mut self, x: Var, mean: &[f32], var: &[f32], eps: f32) -> Result<Var> {
        let ix = self.idx(x)?;
        let y = kernels::normalize(&self.nodes[ix].value, mean, var, eps)?;
        let inv_std = var
            .iter()
            .map(|&v| 1.0 / (v as f64 + eps as f64).sqrt())
            .collect();
        self.push(y, Op::NormalizeFixed(ix, inv_std), "normalize_fixed")
    }

    /// Normalize with the batch's own statistics; gradients flow through them.
    /// Returns the output and the `(mean, var)` used.
    pub fn normalize_batch(&mut self, x: Var, eps: f32) -> Result<(Var, Vec<f32>, Vec<f32>)> {
        let ix = self.idx(x)?;
        let (mean, var) = kernels::batch_stats(&self.nodes[ix].value)?;
        let y = kernels::normalize(&self.nodes[ix].value, &mean, &var, eps)?;
        let inv_std = var
            .iter()
            .map(|&v| 1.0 / (v as f64 + eps as f64).sqrt())
            .collect();
        let out = self.push(y, Op::NormalizeBatch(ix, inv_std), "normalize_batch")?;
        Ok((out, mean, var))
    }

    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let y = kernels::channel_affine(
            &self.nodes[ix].value,
            self.nodes[ig].value.data(),
            self.nodes[ib].value.data(),
        )?;
        self.push(y, Op::ChannelAffine(ix, ig, ib), "channel_affine")
    }

    /// Mean over the leading axis, `[b, C] -> [C]`.
    pub fn mean_axis0(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let (b, c) = self.nodes[ix].value.dims2("mean_axis0")?;
        if b == 0 {
            return Err(mismatch("mean_axis0", "empty leading axis"));
        }
        let d = self.nodes[ix].value.data();
        let y = (0..c)
            .map(|j| ((0..b).map(|i| d[i * c + j] as f64).sum::<f64>() / b as f64) as f32)
            .collect();
        self.push(Tensor::from_vec(y), Op::MeanAxis0(ix), "mean_axis0")
    }

    /// `x - c` for a constant `c` of the same shape.
    pub fn sub_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let ix = self.idx(x)?;
        let xv = &self.nodes[ix].value;
        if xv.shape() != c.shape() {
            return Err(mismatch("sub_const", format!("{:?} vs {:?}", xv.shape(), c.shape())));
        }
        let data = xv.data().iter().zip(c.data()).map(|(a, b)| a - b).collect();
        let y = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(y, Op::SubConst(ix), "sub_const")
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let y = self.nodes[ix].value.map(f32::abs);
        self.push(y, Op::Abs(ix), "abs")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let v = &self.nodes[ix].value;
        if v.is_empty() {
            return Err(mismatch("mean", "empty tensor"));
        }
        let s = v.data().iter().map(|&a| a as f64).sum::<f64>() / v.len() as f64;
        self.push(Tensor::scalar(s as f32), Op::Mean(ix), "mean")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let s = self.nodes[ix].value.data().iter().map(|&a| a as f64).sum::<f64>();
        self.push(Tensor::scalar(s as f32), Op::Sum(ix), "sum")
    }

    /// Row sums of `[n, k]`, giving `[n]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let (n, k) = self.nodes[ix].value.dims2("sum_rows")?;
        let d = self.nodes[ix].value.data();
        let y = (0..n)
            .map(|i| d[i * k..(i + 1) * k].iter().map(|&a| a as f64).sum::<f64>() as f32)
            .collect();
        self.push(Tensor::from_vec(y), Op::SumRows(ix), "sum_rows")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let y = zip_same(&self.nodes[ia].value, &self.nodes[ib].value, "add", |x, y| x + y)?;
        self.push(y, Op::Add(ia, ib), "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let y = zip_same(&self.nodes[ia].value, &self.nodes[ib].value, "mul", |x, y| {
            (x as f64 * y as f64) as f32
        })?;
        self.push(y, Op::Mul(ia, ib), "mul")
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let ix = self.idx(x)?;
        let y = self.nodes[ix].value.map(|v| (v as f64 * s) as f32);
        self.push(y, Op::Scale(ix, s), "scale")
    }

    /// Zero every row (along the leading axis) whose mask entry is false.
    pub fn mask_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let ix = self.idx(x)?;
        let xv = &self.nodes[ix].value;
        let n = xv.shape().first().copied().unwrap_or(0);
        if keep.len() != n {
            return Err(mismatch("mask_rows", format!("{n} rows vs mask of {}", keep.len())));
        }
        let stride = xv.len().checked_div(n).unwrap_or(0);
        let mut y = xv.clone();
        for (row, &k) in y.data_mut().chunks_mut(stride.max(1)).zip(keep) {
            if !k {
                row.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        self.push(y, Op::MaskRows(ix, keep.to_vec()), "mask_rows")
    }

    /// Mean negative log-likelihood of `labels` under softmax of `logits: [n, k]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ix = self.idx(logits)?;
        let (n, k) = self.nodes[ix].value.dims2("cross_entropy")?;
        if labels.len() != n || n == 0 {
            return Err(mismatch("cross_entropy", format!("{n} rows vs {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(mismatch("cross_entropy", format!("label {bad} out of {k} classes")));
        }
        let ls = kernels::log_softmax(&self.nodes[ix].value)?;
        let nll = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -(ls.data()[i * k + l] as f64))
            .sum::<f64>()
            / n as f64;
        self.push(
            Tensor::scalar(nll as f32),
            Op::CrossEntropy(ix, labels.to_vec()),
            "cross_entropy",
        )
    }

    /// Gradients of scalar `loss` with respect to each of `wrt`.
    ///
    /// Variables that the loss does not depend on get a zero gradient.
    pub fn backward(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let il = self.idx(loss)?;
        let targets = wrt.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>>>()?;
        if self.nodes[il].value.len() != 1 {
            return Err(TensorError::NotScalar(self.nodes[il].value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; il + 1];
        grads[il] = Some(vec![1.0]);
        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(targets
            .into_iter()
            .map(|t| {
                let shape = self.nodes[t].value.shape().to_vec();
                let data = match grads.get(t).and_then(|g| g.as_ref()) {
                    Some(g) => g.iter().map(|&v| v as f32).collect(),
                    None => vec![0.0; self.nodes[t].value.len()],
                };
                Tensor::new(shape, data).expect("gradient shape matches value")
            })
            .collect())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        let wants = |j: usize| self.nodes[j].requires_grad;
        let mut acc = |j: usize, d: Vec<f64>| {
            debug_assert_eq!(d.len(), self.nodes[j].value.len());
            match &mut grads[j] {
                Some(existing) => existing.iter_mut().zip(&d).for_each(|(e, v)| *e += v),
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = val(a).dims2("matmul")?;
                let n = val(b).shape()[1];
                if wants(a) {
                    let bd = val(b).data();
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        for p in 0..k {
                            da[r * k + p] = (0..n).map(|c| g[r * n + c] * bd[p * n + c] as f64).sum();
                        }
                    }
                    acc(a, da);
                }
                if wants(b) {
                    let ad = val(a).data();
                    let mut db = vec![0.0; k * n];
                    for r in 0..m {
                        for p in 0..k {
                            let av = ad[r * k + p] as f64;
                            for c in 0..n {
                                db[p * n + c] += av * g[r * n + c];
                            }
                        }
                    }
                    acc(b, db);
                }
            }
            &Op::AddRowBias(x, b) => {
                if wants(x) {
                    acc(x, g.to_vec());
                }
                if wants(b) {
                    let k = val(b).len();
                    let mut db = vec![0.0; k];
                    for row in g.chunks(k) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    acc(b, db);
                }
            }
            &Op::Conv2d {
                x,
                w,
                stride,
                padding,
            } => {
                let (dx, dw) =
                    kernels::conv2d_backward(val(x), val(w), g, stride, padding, wants(x), wants(w))?;
                if let Some(dx) = dx {
                    acc(x, dx);
                }
                if let Some(dw) = dw {
                    acc(w, dw);
                }
            }
            &Op::Relu(x) => {
                let d = val(x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                acc(x, d);
            }
            &Op::AvgPool(x, k) => acc(x, kernels::avgpool2d_backward(val(x).shape(), k, g)),
            &Op::Reshape(x) => acc(x, g.to_vec()),
            &Op::Softmax(x) => {
                let y = node.value.data();
                let k = node.value.shape()[1];
                let mut d = vec![0.0; y.len()];
                for (r, (yr, gr)) in y.chunks(k).zip(g.chunks(k)).enumerate() {
                    let dot: f64 = yr.iter().zip(gr).map(|(&a, b)| a as f64 * b).sum();
                    for c in 0..k {
                        d[r * k + c] = yr[c] as f64 * (gr[c] - dot);
                    }
                }
                acc(x, d);
            }
            &Op::LogSoftmax(x) => {
                let y = node.value.data();
                let k = node.value.shape()[1];
                let mut d = vec![0.0; y.len()];
                for (r, (yr, gr)) in y.chunks(k).zip(g.chunks(k)).enumerate() {
                    let gs: f64 = gr.iter().sum();
                    for c in 0..k {
                        d[r * k + c] = gr[c] - (yr[c] as f64).exp() * gs;
                    }
                }
                acc(x, d);
            }
            &Op::Log(x) => {
                let d = val(x).data().iter().zip(g).map(|(&v, gv)| gv / v as f64).collect();
                acc(x, d);
            }
            &Op::Exp(x) => {
                let d = node.value.data().iter().zip(g).map(|(&y, gv)| gv * y as f64).collect();
                acc(x, d);
            }
            &Op::ChannelMean(x) => {
                let (_, _, h, w) = val(x).dims4("channel_mean")?;
                let hw = h * w;
                let mut d = Vec::with_capacity(val(x).len());
                for gv in g {
                    d.extend(std::iter::repeat_n(gv / hw as f64, hw));
                }
                acc(x, d);
            }
            &Op::ChannelVar(x) => {
                let (_, _, h, w) = val(x).dims4("channel_var")?;
                let hw = h * w;
                let mut d = Vec::with_capacity(val(x).len());
                for (plane, gv) in val(x).data().chunks(hw).zip(g) {
                    let (m, _) = kernels::mean_var(plane);
                    d.extend(plane.iter().map(|&v| gv * 2.0 * (v as f64 - m) / hw as f64));
                }
                acc(x, d);
            }
            Op::NormalizeFixed(x, inv_std) => {
                let (_, c, h, w) = val(*x).dims4("normalize_fixed")?;
                let hw = h * w;
                let mut d = Vec::with_capacity(g.len());
                for (p, gp) in g.chunks(hw).enumerate() {
                    let s = inv_std[p % c];
                    d.extend(gp.iter().map(|v| v * s));
                }
                acc(*x, d);
            }
            Op::NormalizeBatch(x, inv_std) => {
                let (b, c, h, w) = val(*x).dims4("normalize_batch")?;
                let hw = h * w;
                let count = (b * hw) as f64;
                let xhat = node.value.data();
                let mut sum_g = vec![0.0f64; c];
                let mut sum_gx = vec![0.0f64; c];
                for (p, (gp, xp)) in g.chunks(hw).zip(xhat.chunks(hw)).enumerate() {
                    let ch = p % c;
                    for (gv, &xv) in gp.iter().zip(xp) {
                        sum_g[ch] += gv;
                        sum_gx[ch] += gv * xv as f64;
                    }
                }
                let mut d = Vec::with_capacity(g.len());
                for (p, (gp, xp)) in g.chunks(hw).zip(xhat.chunks(hw)).enumerate() {
                    let ch = p % c;
                    let (mg, mgx, s) = (sum_g[ch] / count, sum_gx[ch] / count, inv_std[ch]);
                    d.extend(gp.iter().zip(xp).map(|(gv, &xv)| s * (gv - mg - xv as f64 * mgx)));
                }
                acc(*x, d);
            }
            &Op::ChannelAffine(x, gamma, beta) => {
                let (_, c, h, w) = val(x).dims4("channel_affine")?;
                let hw = h * w;
                if wants(x) {
                    let gd = val(gamma).data();
                    let mut d = Vec::with_capacity(g.len());
                    for (p, gp) in g.chunks(hw).enumerate() {
                        let s = gd[p % c] as f64;
                        d.extend(gp.iter().map(|v| v * s));
                    }
                    acc(x, d);
                }
                if wants(gamma) || wants(beta) {
                    let mut dg = vec![0.0f64; c];
                    let mut db = vec![0.0f64; c];
                    for (p, (gp, xp)) in g.chunks(hw).zip(val(x).data().chunks(hw)).enumerate() {
                        let ch = p % c;
                        for (gv, &xv) in gp.iter().zip(xp) {
                            dg[ch] += gv * xv as f64;
                            db[ch] += gv;
                        }
                    }
                    if wants(gamma) {
                        acc(gamma, dg);
                    }
                    if wants(beta) {
                        acc(beta, db);
                    }
                }
            }
            &Op::MeanAxis0(x) => {
                let (b, c) = val(x).dims2("mean_axis0")?;
                let mut d = Vec::with_capacity(b * c);
                for _ in 0..b {
                    d.extend(g.iter().map(|v| v / b as f64));
                }
                acc(x, d);
            }
            &Op::SubConst(x) => acc(x, g.to_vec()),
            &Op::Abs(x) => {
                let d = val(x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, gv)| {
                        if v > 0.0 {
                            *gv
                        } else if v < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    })
                    .collect();
                acc(x, d);
            }
            &Op::Mean(x) => {
                let n = val(x).len();
                acc(x, vec![g[0] / n as f64; n]);
            }
            &Op::Sum(x) => acc(x, vec![g[0]; val(x).len()]),
            &Op::SumRows(x) => {
                let (n, k) = val(x).dims2("sum_rows")?;
                let mut d = Vec::with_capacity(n * k);
                for gv in g {
                    d.extend(std::iter::repeat_n(*gv, k));
                }
                acc(x, d);
            }
            &Op::Add(a, b) => {
                if wants(a) {
                    acc(a, g.to_vec());
                }
                if wants(b) {
                    acc(b, g.to_vec());
                }
            }
            &Op::Mul(a, b) => {
                if wants(a) {
                    let d = val(b).data().iter().zip(g).map(|(&v, gv)| gv * v as f64).collect();
                    acc(a, d);
                }
                if wants(b) {
                    let d = val(a).data().iter().zip(g).map(|(&v, gv)| gv * v as f64).collect();
                    acc(b, d);
                }
            }
            &Op::Scale(x, s) => acc(x, g.iter().map(|v| v * s).collect()),
            Op::MaskRows(x, keep) => {
                let stride = g.len() / keep.len().max(1);
                let mut d = g.to_vec();
                for (row, &k) in d.chunks_mut(stride.max(1)).zip(keep) {
                    if !k {
                        row.iter_mut().for_each(|v| *v = 0.0);
                    }
                }
                acc(*x, d);
            }
            Op::CrossEntropy(x, labels) => {
                let p = kernels::softmax(val(*x))?;
                let k = p.shape()[1];
                let n = labels.len() as f64;
                let mut d: Vec<f64> = p.data().iter().map(|&v| v as f64 * g[0] / n).collect();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * k + l] -= g[0] / n;
                }
                acc(*x, d);
            }
        }
        Ok(())
    }
}

fn op_inputs(op: &Op) -> Vec<usize> {
    match *op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) | Op::AddRowBias(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![a, b],
        Op::Conv2d { x, w, .. } => vec![x, w],
        Op::ChannelAffine(x, g, b) => vec![x, g, b],
        Op::Relu(x)
        | Op::AvgPool(x, _)
        | Op::Reshape(x)
        | Op::Softmax(x)
        | Op::LogSoftmax(x)
        | Op::Log(x)
        | Op::Exp(x)
        | Op::ChannelMean(x)
        | Op::ChannelVar(x)
        | Op::NormalizeFixed(x, _)
        | Op::NormalizeBatch(x, _)
        | Op::MeanAxis0(x)
        | Op::SubConst(x)
        | Op::Abs(x)
        | Op::Mean(x)
        | Op::Sum(x)
        | Op::SumRows(x)
        | Op::Scale(x, _)
        | Op::MaskRows(x, _)
        | Op::CrossEntropy(x, _) => vec![x],
    }
}

fn zip_same(a: &Tensor, b: &Tensor, op: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(mismatch(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}
