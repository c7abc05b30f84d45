//! Sequential CNN classifier with batch-normalization layers.
//!
//! Convolution and linear weights are frozen during adaptation; the per-channel
//! BN scale (`gamma`) and shift (`beta`) are the only trainable parameters.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::format::{self, FormatError, RecordSet};
use crate::kernels;
use crate::tensor::{mismatch, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("invalid architecture: {0}")]
    Arch(String),
    #[error("batch-norm layer {layer}: {detail}")]
    BatchNorm { layer: usize, detail: String },
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Reference architecture: `[Conv-BN-ReLU] x n - AvgPool - Flatten - Linear`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchSpec {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub conv_channels: Vec<usize>,
    pub conv_strides: Vec<usize>,
    pub kernel: usize,
    pub padding: usize,
    pub epsilon: f32,
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self {
            in_channels: 3,
            height: 16,
            width: 16,
            num_classes: 10,
            conv_channels: vec![16, 32],
            conv_strides: vec![1, 2],
            kernel: 3,
            padding: 1,
            epsilon: 1e-5,
        }
    }
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(ModelError::Arch(m.to_string()));
        if self.conv_channels.is_empty() {
            return fail("at least one convolution block is required");
        }
        if self.conv_channels.len() != self.conv_strides.len() {
            return fail("conv_channels and conv_strides differ in length");
        }
        if self.num_classes < 2 {
            return fail("num_classes must be at least 2");
        }
        if self.in_channels == 0 || self.kernel == 0 || self.conv_channels.contains(&0) {
            return fail("channel counts and kernel size must be positive");
        }
        if self.conv_strides.contains(&0) {
            return fail("strides must be positive");
        }
        if !(self.epsilon > 0.0) {
            return fail("epsilon must be positive");
        }
        let (mut h, mut w) = (self.height, self.width);
        for &s in &self.conv_strides {
            if self.kernel > h + 2 * self.padding || self.kernel > w + 2 * self.padding {
                return fail("kernel larger than padded feature map");
            }
            h = (h + 2 * self.padding - self.kernel) / s + 1;
            w = (w + 2 * self.padding - self.kernel) / s + 1;
        }
        Ok(())
    }

    /// Spatial size after the last convolution.
    pub fn final_spatial(&self) -> (usize, usize) {
        let (mut h, mut w) = (self.height, self.width);
        for &s in &self.conv_strides {
            h = (h + 2 * self.padding - self.kernel) / s + 1;
            w = (w + 2 * self.padding - self.kernel) / s + 1;
        }
        (h, w)
    }

    pub fn input_shape(&self, batch: usize) -> [usize; 4] {
        [batch, self.in_channels, self.height, self.width]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    /// Normalize with the stored `mu_norm` / `sigma2_norm`.
    FixedStats,
    /// Normalize with the current batch's statistics.
    BatchStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnLayerState {
    pub mu_norm: Vec<f32>,
    pub sigma2_norm: Vec<f32>,
    /// Running statistics accumulated during source training.
    pub mu_popu: Vec<f32>,
    pub sigma2_popu: Vec<f32>,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub epsilon: f32,
    pub mode: BnMode,
}

impl BnLayerState {
    pub fn new(channels: usize, epsilon: f32) -> Self {
        Self {
            mu_norm: vec![0.0; channels],
            sigma2_norm: vec![1.0; channels],
            mu_popu: vec![0.0; channels],
            sigma2_popu: vec![1.0; channels],
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            epsilon,
            mode: BnMode::FixedStats,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Normalize with the population statistics.
    pub fn use_population(&mut self) {
        self.mu_norm = self.mu_popu.clone();
        self.sigma2_norm = self.sigma2_popu.clone();
        self.mode = BnMode::FixedStats;
    }

    fn check(&self, layer: usize) -> Result<()> {
        let c = self.channels();
        let lens = [
            self.mu_norm.len(),
            self.sigma2_norm.len(),
            self.mu_popu.len(),
            self.sigma2_popu.len(),
            self.beta.len(),
        ];
        if lens.iter().any(|&l| l != c) {
            return Err(ModelError::BatchNorm {
                layer,
                detail: "statistic lengths disagree".into(),
            });
        }
        if self.sigma2_norm.iter().chain(&self.sigma2_popu).any(|&v| !(v >= 0.0)) {
            return Err(ModelError::BatchNorm {
                layer,
                detail: "negative or non-finite variance".into(),
            });
        }
        if !(self.epsilon > 0.0) {
            return Err(ModelError::BatchNorm {
                layer,
                detail: "epsilon must be positive".into(),
            });
        }
        Ok(())
    }
}

/// Apply one BN layer to a raw tensor without recording gradients.
pub fn bn_forward(x: &Tensor, state: &BnLayerState) -> Result<Tensor> {
    state.check(0)?;
    let (_, c, _, _) = x.dims4("bn_forward")?;
    if c != state.channels() {
        return Err(mismatch("bn_forward", format!("{c} channels vs {}", state.channels())).into());
    }
    let xhat = match state.mode {
        BnMode::FixedStats => {
            kernels::normalize(x, &state.mu_norm, &state.sigma2_norm, state.epsilon)?
        }
        BnMode::BatchStats => {
            let (mu, var) = kernels::batch_stats(x)?;
            kernels::normalize(x, &mu, &var, state.epsilon)?
        }
    };
    Ok(kernels::channel_affine(&xhat, &state.gamma, &state.beta)?)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv {
        weight: Tensor,
        stride: usize,
        padding: usize,
    },
    BatchNorm(BnLayerState),
    Relu,
    AvgPool {
        kernel: usize,
    },
    Flatten,
    Linear {
        /// `[in, out]`
        weight: Tensor,
        bias: Tensor,
    },
}

/// Where DA statistics are read from a BN layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CapturePoint {
    /// After `gamma · x̂ + beta`.
    #[default]
    PostAffine,
    /// After normalization, before the affine transform.
    PostNormalize,
}

/// Which parameters require gradients in a taped forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    None,
    Affine,
    All,
}

#[derive(Debug, Clone)]
pub struct TapeOptions<'a> {
    pub trainable: Trainable,
    /// BN ordinals whose channel statistics are captured.
    pub capture: &'a [usize],
    pub capture_point: CapturePoint,
}

/// Handles produced by [`ModelGraph::forward_on_tape`].
#[derive(Debug)]
pub struct TapeForward {
    pub logits: Var,
    /// `(gamma, beta)` per BN layer in order.
    pub affine: Vec<(Var, Var)>,
    /// Conv and linear parameters in layer order.
    pub weights: Vec<Var>,
    /// `(bn ordinal, batch-averaged channel mean [C], batch-averaged channel variance [C])`.
    pub captured: Vec<(usize, Var, Var)>,
    /// Statistics used by BN layers running in `BatchStats` mode, by BN ordinal.
    pub batch_stats: Vec<Option<(Vec<f32>, Vec<f32>)>>,
}

/// Batch-averaged per-channel statistics for one BN layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStats {
    pub layer: usize,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ChannelStatsCapture {
    pub layers: Vec<LayerStats>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub stats: Option<ChannelStatsCapture>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    arch: ArchSpec,
    layers: Vec<Layer>,
    /// BN ordinals receiving DA supervision.
    da_layers: Vec<usize>,
}

impl ModelGraph {
    /// Fresh model with He-initialized weights and identity BN layers.
    pub fn new(arch: &ArchSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut c_in = arch.in_channels;
        for (&c_out, &stride) in arch.conv_channels.iter().zip(&arch.conv_strides) {
            let fan_in = c_in * arch.kernel * arch.kernel;
            let weight = he_tensor(&[c_out, c_in, arch.kernel, arch.kernel], fan_in, &mut rng);
            layers.push(Layer::Conv {
                weight,
                stride,
                padding: arch.padding,
            });
            layers.push(Layer::BatchNorm(BnLayerState::new(c_out, arch.epsilon)));
            layers.push(Layer::Relu);
            c_in = c_out;
        }
        let (h, w) = arch.final_spatial();
        let kernel = h.min(w);
        layers.push(Layer::AvgPool { kernel });
        layers.push(Layer::Flatten);
        let features = c_in * (h / kernel) * (w / kernel);
        layers.push(Layer::Linear {
            weight: he_tensor(&[features, arch.num_classes], features, &mut rng),
            bias: Tensor::zeros(&[arch.num_classes]),
        });
        let n_bn = arch.conv_channels.len();
        Ok(Self {
            arch: arch.clone(),
            layers,
            da_layers: (0..n_bn).collect(),
        })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn da_layers(&self) -> &[usize] {
        &self.da_layers
    }

    pub fn set_da_layers(&mut self, layers: Vec<usize>) -> Result<()> {
        let n = self.bn_count();
        if let Some(&bad) = layers.iter().find(|&&l| l >= n) {
            return Err(ModelError::Arch(format!("DA layer {bad} but only {n} BN layers")));
        }
        self.da_layers = layers;
        Ok(())
    }

    pub fn bn_count(&self) -> usize {
        self.bn_layers().count()
    }

    pub fn bn_layers(&self) -> impl Iterator<Item = &BnLayerState> {
        self.layers.iter().filter_map(|l| match l {
            Layer::BatchNorm(s) => Some(s),
            _ => None,
        })
    }

    pub fn bn_layers_mut(&mut self) -> impl Iterator<Item = &mut BnLayerState> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::BatchNorm(s) => Some(s),
            _ => None,
        })
    }

    pub fn bn_layer(&self, ordinal: usize) -> Option<&BnLayerState> {
        self.bn_layers().nth(ordinal)
    }

    pub fn set_bn_mode(&mut self, mode: BnMode) {
        for bn in self.bn_layers_mut() {
            bn.mode = mode;
        }
    }

    /// All `gamma` then `beta` per BN layer, cloned.
    pub fn affine_snapshot(&self) -> Vec<(Vec<f32>, Vec<f32>)> {
        self.bn_layers().map(|b| (b.gamma.clone(), b.beta.clone())).collect()
    }

    pub fn restore_affine(&mut self, snapshot: &[(Vec<f32>, Vec<f32>)]) {
        for (bn, (g, b)) in self.bn_layers_mut().zip(snapshot) {
            bn.gamma.clone_from(g);
            bn.beta.clone_from(b);
        }
    }

    /// Conv and linear tensors in layer order.
    pub fn frozen_weights(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                Layer::Conv { weight, .. } => out.push(weight),
                Layer::Linear { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                _ => {}
            }
        }
        out
    }

    pub(crate) fn frozen_weights_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            match l {
                Layer::Conv { weight, .. } => out.push(weight),
                Layer::Linear { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                _ => {}
            }
        }
        out
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (b, c, h, w) = x.dims4("forward")?;
        let want = self.arch.input_shape(b);
        if [b, c, h, w] != want || b == 0 {
            return Err(mismatch("forward", format!("input {:?}, expected {:?}", x.shape(), want)).into());
        }
        Ok(())
    }

    /// Record a forward pass on `tape`.
    pub fn forward_on_tape(&self, tape: &mut Tape, x: Var, opts: &TapeOptions<'_>) -> Result<TapeForward> {
        self.check_input(tape.value(x))?;
        let want_weights = opts.trainable == Trainable::All;
        let want_affine = opts.trainable != Trainable::None;
        let mut h = x;
        let mut affine = Vec::new();
        let mut weights = Vec::new();
        let mut captured = Vec::new();
        let mut batch_stats = Vec::new();
        let mut bn_idx = 0;
        for layer in &self.layers {
            h = match layer {
                Layer::Conv {
                    weight,
                    stride,
                    padding,
                } => {
                    let w = tape.leaf(weight.clone(), want_weights)?;
                    weights.push(w);
                    tape.conv2d(h, w, *stride, *padding)?
                }
                Layer::BatchNorm(bn) => {
                    bn.check(bn_idx)?;
                    let xhat = match bn.mode {
                        BnMode::FixedStats => {
                            batch_stats.push(None);
                            tape.normalize_fixed(h, &bn.mu_norm, &bn.sigma2_norm, bn.epsilon)?
                        }
                        BnMode::BatchStats => {
                            let (y, mu, var) = tape.normalize_batch(h, bn.epsilon)?;
                            batch_stats.push(Some((mu, var)));
                            y
                        }
                    };
                    let g = tape.leaf(Tensor::from_vec(bn.gamma.clone()), want_affine)?;
                    let b = tape.leaf(Tensor::from_vec(bn.beta.clone()), want_affine)?;
                    affine.push((g, b));
                    let y = tape.channel_affine(xhat, g, b)?;
                    if opts.capture.contains(&bn_idx) {
                        let src = match opts.capture_point {
                            CapturePoint::PostAffine => y,
                            CapturePoint::PostNormalize => xhat,
                        };
                        let m = tape.channel_mean(src)?;
                        let m = tape.mean_axis0(m)?;
                        let d2 = tape.channel_var(src)?;
                        let d2 = tape.mean_axis0(d2)?;
                        captured.push((bn_idx, m, d2));
                    }
                    bn_idx += 1;
                    y
                }
                Layer::Relu => tape.relu(h)?,
                Layer::AvgPool { kernel } => tape.avgpool2d(h, *kernel)?,
                Layer::Flatten => tape.flatten(h)?,
                Layer::Linear { weight, bias } => {
                    let w = tape.leaf(weight.clone(), want_weights)?;
                    let b = tape.leaf(bias.clone(), want_weights)?;
                    weights.push(w);
                    weights.push(b);
                    let y = tape.matmul(h, w)?;
                    tape.add_row_bias(y, b)?
                }
            };
        }
        captured.sort_by_key(|c| c.0);
        Ok(TapeForward {
            logits: h,
            affine,
            weights,
            captured,
            batch_stats,
        })
    }

    /// Inference pass. With `capture`, returns batch-averaged channel statistics
    /// of every DA layer's post-BN output.
    pub fn forward(&self, batch: &Tensor, capture: bool) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone())?;
        let layers = if capture { self.da_layers.clone() } else { Vec::new() };
        let out = self.forward_on_tape(
            &mut tape,
            x,
            &TapeOptions {
                trainable: Trainable::None,
                capture: &layers,
                capture_point: CapturePoint::PostAffine,
            },
        )?;
        let stats = capture.then(|| read_capture(&tape, &out.captured));
        Ok(ForwardOutput {
            logits: tape.value(out.logits).clone(),
            stats,
        })
    }

    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        Ok(self.forward(batch, false)?.logits.argmax_rows()?)
    }

    /// Output tensor of every BN layer (post-affine), in order.
    pub fn bn_outputs(&self, batch: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(batch)?;
        let mut h = batch.clone();
        let mut outs = Vec::new();
        for layer in &self.layers {
            h = self.apply_plain(layer, &h)?;
            if matches!(layer, Layer::BatchNorm(_)) {
                outs.push(h.clone());
            }
        }
        Ok(outs)
    }

    fn apply_plain(&self, layer: &Layer, h: &Tensor) -> Result<Tensor> {
        Ok(match layer {
            Layer::Conv {
                weight,
                stride,
                padding,
            } => kernels::conv2d(h, weight, *stride, *padding)?,
            Layer::BatchNorm(bn) => bn_forward(h, bn)?,
            Layer::Relu => h.map(|v| v.max(0.0)),
            Layer::AvgPool { kernel } => kernels::avgpool2d(h, *kernel)?,
            Layer::Flatten => {
                let b = h.shape()[0];
                let rest = h.len() / b;
                h.clone().reshape(&[b, rest])?
            }
            Layer::Linear { weight, bias } => {
                let mut y = kernels::matmul(h, weight)?;
                let k = bias.len();
                for row in y.data_mut().chunks_mut(k) {
                    row.iter_mut().zip(bias.data()).for_each(|(v, b)| *v += b);
                }
                y
            }
        })
    }

    /// Blend every BN layer's normalization statistics towards `batch`:
    /// `norm = alpha · popu + (1 - alpha) · batch`. Layers are blended in order
    /// as activations propagate, so deeper layers see blended upstream output.
    /// All BN layers end in `FixedStats` mode.
    pub fn blend_with_batch(&mut self, batch: &Tensor, alpha: f32) -> Result<()> {
        self.check_input(batch)?;
        let mut h = batch.clone();
        let n = self.layers.len();
        for i in 0..n {
            if let Layer::BatchNorm(bn) = &mut self.layers[i] {
                let (mu_b, var_b) = kernels::batch_stats(&h)?;
                bn.mu_norm = blend(&bn.mu_popu, &mu_b, alpha);
                bn.sigma2_norm = blend(&bn.sigma2_popu, &var_b, alpha);
                bn.mode = BnMode::FixedStats;
            }
            h = self.apply_plain(&self.layers[i], &h)?;
        }
        Ok(())
    }

    pub fn save_weights(&self, path: &Path) -> Result<()> {
        format::write_file(path, &self.to_records())?;
        Ok(())
    }

    /// Load a weight file and check it against `arch`.
    pub fn load_weights(path: &Path, arch: &ArchSpec) -> Result<Self> {
        Self::from_records(format::read_file(path)?, arch)
    }

    pub fn to_records(&self) -> Vec<(String, Tensor)> {
        let mut recs = Vec::new();
        let (mut conv, mut bn) = (0, 0);
        for l in &self.layers {
            match l {
                Layer::Conv { weight, .. } => {
                    recs.push((format!("conv{conv}.weight"), weight.clone()));
                    conv += 1;
                }
                Layer::BatchNorm(s) => {
                    let v = |d: &Vec<f32>| Tensor::from_vec(d.clone());
                    recs.push((format!("bn{bn}.gamma"), v(&s.gamma)));
                    recs.push((format!("bn{bn}.beta"), v(&s.beta)));
                    recs.push((format!("bn{bn}.mu_popu"), v(&s.mu_popu)));
                    recs.push((format!("bn{bn}.sigma2_popu"), v(&s.sigma2_popu)));
                    recs.push((format!("bn{bn}.mu_norm"), v(&s.mu_norm)));
                    recs.push((format!("bn{bn}.sigma2_norm"), v(&s.sigma2_norm)));
                    let mode = match s.mode {
                        BnMode::FixedStats => 0.0,
                        BnMode::BatchStats => 1.0,
                    };
                    recs.push((format!("bn{bn}.config"), Tensor::from_vec(vec![s.epsilon, mode])));
                    bn += 1;
                }
                Layer::Linear { weight, bias } => {
                    recs.push(("linear.weight".into(), weight.clone()));
                    recs.push(("linear.bias".into(), bias.clone()));
                }
                _ => {}
            }
        }
        recs.push(("meta.da_layers".into(), format::index_tensor(&self.da_layers)));
        recs
    }

    pub fn from_records(records: Vec<(String, Tensor)>, arch: &ArchSpec) -> Result<Self> {
        let mut graph = Self::new(arch, 0)?;
        let mut set = RecordSet::new(records);
        let (mut conv, mut bn) = (0, 0);
        for l in &mut graph.layers {
            match l {
                Layer::Conv { weight, .. } => {
                    *weight = set.take_shaped(&format!("conv{conv}.weight"), weight.shape())?;
                    conv += 1;
                }
                Layer::BatchNorm(s) => {
                    let c = [s.channels()];
                    let mut get = |n: &str| -> Result<Vec<f32>> {
                        Ok(set.take_shaped(&format!("bn{bn}.{n}"), &c)?.into_data())
                    };
                    s.gamma = get("gamma")?;
                    s.beta = get("beta")?;
                    s.mu_popu = get("mu_popu")?;
                    s.sigma2_popu = get("sigma2_popu")?;
                    s.mu_norm = get("mu_norm")?;
                    s.sigma2_norm = get("sigma2_norm")?;
                    let cfg = set.take_shaped(&format!("bn{bn}.config"), &[2])?;
                    s.epsilon = cfg.data()[0];
                    s.mode = match cfg.data()[1] {
                        0.0 => BnMode::FixedStats,
                        1.0 => BnMode::BatchStats,
                        v => {
                            return Err(FormatError::Invalid(format!("bn{bn}.config mode {v}")).into())
                        }
                    };
                    s.check(bn)?;
                    bn += 1;
                }
                Layer::Linear { weight, bias } => {
                    *weight = set.take_shaped("linear.weight", weight.shape())?;
                    *bias = set.take_shaped("linear.bias", bias.shape())?;
                }
                _ => {}
            }
        }
        let da = set.take("meta.da_layers")?;
        let da = format::tensor_indices("meta.da_layers", &da)?;
        set.finish()?;
        graph.set_da_layers(da)?;
        Ok(graph)
    }
}

fn blend(popu: &[f32], batch: &[f32], alpha: f32) -> Vec<f32> {
    popu.iter()
        .zip(batch)
        .map(|(&p, &b)| alpha * p + (1.0 - alpha) * b)
        .collect()
}

pub(crate) fn read_capture(tape: &Tape, captured: &[(usize, Var, Var)]) -> ChannelStatsCapture {
    ChannelStatsCapture {
        layers: captured
            .iter()
            .map(|&(layer, m, d2)| LayerStats {
                layer,
                mean: tape.value(m).data().to_vec(),
                var: tape.value(d2).data().to_vec(),
            })
            .collect(),
    }
}

fn he_tensor(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect()).expect("sized")
}
