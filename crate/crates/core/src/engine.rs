//! Online test-time adaptation.
//!
//! Before the first update every BN layer's normalization statistics are
//! blended once towards the first test batch; afterwards only the BN affine
//! parameters move, driven by the distribution-alignment (DA) loss, the
//! thresholded entropy (EM) loss, or their sum.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::model::{read_capture, BnMode, CapturePoint, ChannelStatsCapture, ModelError, ModelGraph, TapeOptions, Trainable};
use crate::optim::SgdMomentum;
use crate::source::{SourceError, SourceStats};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("adaptation state is already initialized")]
    AlreadyInitialized,
    #[error("adaptation state is not initialized")]
    NotInitialized,
    #[error("the source variant never adapts and cannot be initialized")]
    SourceVariant,
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite loss or gradient ({detail}); parameters left unchanged")]
    NonFinite { detail: String },
    #[error("statistics mismatch: {0}")]
    StatsMismatch(String),
    #[error("invalid method config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(ModelError),
    #[error(transparent)]
    Source(#[from] SourceError),
    #[error(transparent)]
    Tensor(TensorError),
}

impl From<ModelError> for EngineError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Tensor(t) => t.into(),
            other => EngineError::Model(other),
        }
    }
}

impl From<TensorError> for EngineError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::NonFinite { op } => EngineError::NonFinite {
                detail: format!("produced by {op}"),
            },
            other => EngineError::Tensor(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Frozen source model with population statistics.
    Source,
    /// Normalize with current-batch statistics; no parameter updates.
    Ttbn,
    EmOnly,
    DaOnly,
    DaEm,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Source => "source",
            Variant::Ttbn => "ttbn",
            Variant::EmOnly => "em_only",
            Variant::DaOnly => "da_only",
            Variant::DaEm => "da_em",
        }
    }

    pub fn uses_da(self) -> bool {
        matches!(self, Variant::DaOnly | Variant::DaEm)
    }

    pub fn uses_em(self) -> bool {
        matches!(self, Variant::EmOnly | Variant::DaEm)
    }

    pub fn updates(self) -> bool {
        self.uses_da() || self.uses_em()
    }
}

/// Which BN layers receive DA supervision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DaLayerSelection {
    #[default]
    All,
    /// The shallower half (at least one layer).
    LowHalf,
    /// The deeper half.
    HighHalf,
}

impl DaLayerSelection {
    pub fn layers(self, bn_count: usize) -> Vec<usize> {
        let split = (bn_count / 2).max(1).min(bn_count);
        match self {
            DaLayerSelection::All => (0..bn_count).collect(),
            DaLayerSelection::LowHalf => (0..split).collect(),
            DaLayerSelection::HighHalf => (split.min(bn_count.saturating_sub(1))..bn_count).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodConfig {
    pub variant: Variant,
    /// Weight of the population statistics in the first-batch blend.
    pub alpha: f32,
    /// Confidence threshold on the max softmax probability for the EM loss.
    pub theta: f32,
    pub lr: f32,
    pub momentum: f32,
    pub da_layers: DaLayerSelection,
    pub capture_point: CapturePoint,
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self {
            variant: Variant::DaEm,
            alpha: 0.9,
            theta: 0.99,
            lr: 5e-3,
            momentum: 0.9,
            da_layers: DaLayerSelection::All,
            capture_point: CapturePoint::PostAffine,
        }
    }
}

impl MethodConfig {
    pub fn with_variant(variant: Variant) -> Self {
        Self {
            variant,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: &str| Err(EngineError::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must be in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return bad("theta must be in [0, 1]");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub l_da: f32,
    pub l_em: f32,
    /// Always `l_da + l_em`.
    pub l_final: f32,
    pub n_confident: usize,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    /// Argmax class per sample, from the model state before this step's update.
    pub predictions: Vec<usize>,
    pub report: LossReport,
}

/// DA loss from captured statistics: per layer
/// `(1/C) Σ_j |m_j - m̄_j| + |d²_j - d̄²_j|`, averaged over layers.
pub fn da_loss(captured: &ChannelStatsCapture, reference: &SourceStats) -> Result<f32, EngineError> {
    check_layers(captured.layers.iter().map(|l| (l.layer, l.mean.len())), reference)?;
    if captured.layers.is_empty() {
        return Err(EngineError::StatsMismatch("no DA layers".into()));
    }
    let total: f64 = captured
        .layers
        .iter()
        .zip(&reference.layers)
        .map(|(t, s)| {
            let c = t.mean.len() as f64;
            let sum: f64 = (0..t.mean.len())
                .map(|j| {
                    (t.mean[j] as f64 - s.m_bar[j] as f64).abs() + (t.var[j] as f64 - s.d2_bar[j] as f64).abs()
                })
                .sum();
            sum / c
        })
        .sum();
    Ok((total / captured.layers.len() as f64) as f32)
}

fn check_layers(captured: impl Iterator<Item = (usize, usize)>, reference: &SourceStats) -> Result<(), EngineError> {
    let cap: Vec<(usize, usize)> = captured.collect();
    let refs: Vec<(usize, usize)> = reference.layers.iter().map(|l| (l.layer, l.m_bar.len())).collect();
    if cap != refs {
        return Err(EngineError::StatsMismatch(format!(
            "captured (layer, channels) {cap:?} vs reference {refs:?}"
        )));
    }
    Ok(())
}

/// Record the DA loss on `tape` over captured `(layer, mean, var)` handles.
pub fn da_loss_on_tape(tape: &mut Tape, captured: &[(usize, Var, Var)], reference: &SourceStats) -> Result<Var, EngineError> {
    check_layers(captured.iter().map(|&(l, m, _)| (l, tape.value(m).len())), reference)?;
    if captured.is_empty() {
        return Err(EngineError::StatsMismatch("no DA layers".into()));
    }
    let mut per_layer = Vec::with_capacity(captured.len());
    for (&(_, m, d2), s) in captured.iter().zip(&reference.layers) {
        let dm = tape.sub_const(m, &Tensor::from_vec(s.m_bar.clone()))?;
        let dm = tape.abs(dm)?;
        let dv = tape.sub_const(d2, &Tensor::from_vec(s.d2_bar.clone()))?;
        let dv = tape.abs(dv)?;
        let both = tape.add(dm, dv)?;
        per_layer.push(tape.mean(both)?);
    }
    let mut total = per_layer[0];
    for &l in &per_layer[1..] {
        total = tape.add(total, l)?;
    }
    Ok(tape.scale(total, 1.0 / per_layer.len() as f64)?)
}

/// Summed softmax entropy (natural log) over samples whose max probability
/// exceeds `theta`. Returns the loss and the number of such samples.
pub fn em_loss(logits: &Tensor, theta: f32) -> Result<(f32, usize), EngineError> {
    let mut tape = Tape::new();
    let x = tape.constant(logits.clone())?;
    let (l, n) = em_loss_on_tape(&mut tape, x, theta)?;
    Ok((tape.value(l).item(), n))
}

pub fn em_loss_on_tape(tape: &mut Tape, logits: Var, theta: f32) -> Result<(Var, usize), EngineError> {
    let (_, k) = tape.value(logits).dims2("em_loss")?;
    let ls = tape.log_softmax(logits)?;
    let keep: Vec<bool> = tape
        .value(ls)
        .data()
        .chunks(k)
        .map(|row| row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)).exp() > theta)
        .collect();
    let p = tape.exp(ls)?;
    let plogp = tape.mul(p, ls)?;
    let rows = tape.sum_rows(plogp)?;
    let ent = tape.scale(rows, -1.0)?;
    let masked = tape.mask_rows(ent, &keep)?;
    let total = tape.sum(masked)?;
    Ok((total, keep.iter().filter(|&&k| k).count()))
}

/// Model plus everything the online loop mutates.
#[derive(Debug, Clone)]
pub struct AdaptationState {
    model: ModelGraph,
    method: MethodConfig,
    reference: SourceStats,
    da_layers: Vec<usize>,
    initial_affine: Vec<(Vec<f32>, Vec<f32>)>,
    optimizer: SgdMomentum,
    initialized: bool,
}

impl AdaptationState {
    /// `reference` must cover every layer the method's DA selection picks.
    /// The model starts normalizing with its population statistics.
    pub fn new(mut model: ModelGraph, method: MethodConfig, reference: &SourceStats) -> Result<Self, EngineError> {
        method.validate()?;
        for bn in model.bn_layers_mut() {
            bn.use_population();
        }
        let da_layers = method.da_layers.layers(model.bn_count());
        let reference = if method.variant.uses_da() {
            reference.subset(&da_layers)?
        } else {
            reference.clone()
        };
        if method.variant.uses_da() {
            for l in &reference.layers {
                let c = model.bn_layer(l.layer).map_or(0, |b| b.channels());
                if l.m_bar.len() != c {
                    return Err(EngineError::StatsMismatch(format!(
                        "layer {} has {c} channels, reference {}",
                        l.layer,
                        l.m_bar.len()
                    )));
                }
            }
        }
        Ok(Self {
            initial_affine: model.affine_snapshot(),
            optimizer: SgdMomentum::new(method.lr, method.momentum),
            model,
            method,
            reference,
            da_layers,
            initialized: false,
        })
    }

    pub fn model(&self) -> &ModelGraph {
        &self.model
    }

    pub fn method(&self) -> &MethodConfig {
        &self.method
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn initial_affine(&self) -> &[(Vec<f32>, Vec<f32>)] {
        &self.initial_affine
    }

    pub fn optimizer(&self) -> &SgdMomentum {
        &self.optimizer
    }

    pub fn da_layer_ids(&self) -> &[usize] {
        &self.da_layers
    }

    /// One-time setup on the first test batch: TTBN switches to batch
    /// statistics; adapting variants blend normalization statistics.
    pub fn init_adaptation(&mut self, first_batch: &Tensor) -> Result<(), EngineError> {
        if self.initialized {
            return Err(EngineError::AlreadyInitialized);
        }
        self.prepare(first_batch)?;
        self.initialized = true;
        Ok(())
    }

    fn prepare(&mut self, batch: &Tensor) -> Result<(), EngineError> {
        if batch.shape().first().copied().unwrap_or(0) == 0 {
            return Err(EngineError::EmptyBatch);
        }
        match self.method.variant {
            Variant::Source => Err(EngineError::SourceVariant),
            Variant::Ttbn => {
                self.model.set_bn_mode(BnMode::BatchStats);
                Ok(())
            }
            _ => Ok(self.model.blend_with_batch(batch, self.method.alpha)?),
        }
    }

    /// Restore the initial affine parameters, zero the optimizer velocity and
    /// re-blend normalization statistics treating `batch` as the first batch.
    pub fn reset(&mut self, batch: &Tensor) -> Result<(), EngineError> {
        self.model.restore_affine(&self.initial_affine);
        self.optimizer.reset();
        if self.method.variant != Variant::Source {
            self.prepare(batch)?;
        }
        Ok(())
    }

    /// Predict on `images`, then (for adapting variants) take one SGD step on
    /// the BN affine parameters.
    pub fn adapt_step(&mut self, images: &Tensor) -> Result<StepOutput, EngineError> {
        if images.shape().first().copied().unwrap_or(0) == 0 {
            return Err(EngineError::EmptyBatch);
        }
        let variant = self.method.variant;
        if variant != Variant::Source && !self.initialized {
            return Err(EngineError::NotInitialized);
        }
        if !variant.updates() {
            let predictions = self.model.predict(images)?;
            return Ok(StepOutput {
                predictions,
                report: LossReport::default(),
            });
        }
        let (predictions, report, grads) = self.losses_and_grads(images)?;
        let mut affine = self.model.affine_snapshot();
        {
            let mut params: Vec<&mut [f32]> = Vec::with_capacity(2 * affine.len());
            for (g, b) in affine.iter_mut() {
                params.push(g);
                params.push(b);
            }
            let grad_refs: Vec<&[f32]> = grads.iter().map(|g| g.data()).collect();
            self.optimizer.step(&mut params, &grad_refs);
        }
        if affine.iter().any(|(g, b)| g.iter().chain(b).any(|v| !v.is_finite())) {
            return Err(EngineError::NonFinite {
                detail: "affine update".into(),
            });
        }
        self.model.restore_affine(&affine);
        Ok(StepOutput { predictions, report })
    }

    /// Forward pass, loss report and gradients of the final loss with respect
    /// to `(gamma, beta)` of every BN layer, without changing any state.
    pub fn losses_and_grads(&self, images: &Tensor) -> Result<(Vec<usize>, LossReport, Vec<Tensor>), EngineError> {
        let variant = self.method.variant;
        let capture: &[usize] = if variant.uses_da() { &self.da_layers } else { &[] };
        let mut tape = Tape::new();
        let x = tape.constant(images.clone())?;
        let fwd = self.model.forward_on_tape(
            &mut tape,
            x,
            &TapeOptions {
                trainable: Trainable::Affine,
                capture,
                capture_point: self.method.capture_point,
            },
        )?;
        let predictions = tape.value(fwd.logits).argmax_rows()?;
        let mut report = LossReport::default();
        let da = if variant.uses_da() {
            let l = da_loss_on_tape(&mut tape, &fwd.captured, &self.reference)?;
            report.l_da = tape.value(l).item();
            Some(l)
        } else {
            None
        };
        let em = if variant.uses_em() {
            let (l, n) = em_loss_on_tape(&mut tape, fwd.logits, self.method.theta)?;
            report.l_em = tape.value(l).item();
            report.n_confident = n;
            Some(l)
        } else {
            None
        };
        report.l_final = report.l_da + report.l_em;
        let loss = match (da, em) {
            (Some(a), Some(b)) => tape.add(a, b)?,
            (Some(a), None) | (None, Some(a)) => a,
            (None, None) => unreachable!("non-updating variants return early"),
        };
        if !report.l_final.is_finite() {
            return Err(EngineError::NonFinite {
                detail: format!("l_final = {}", report.l_final),
            });
        }
        let wrt: Vec<Var> = fwd.affine.iter().flat_map(|&(g, b)| [g, b]).collect();
        let grads = tape.backward(loss, &wrt)?;
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(EngineError::NonFinite {
                detail: "affine gradient".into(),
            });
        }
        Ok((predictions, report, grads))
    }

    /// Captured DA statistics for `images` under the current state.
    pub fn capture(&self, images: &Tensor) -> Result<ChannelStatsCapture, EngineError> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone())?;
        let fwd = self.model.forward_on_tape(
            &mut tape,
            x,
            &TapeOptions {
                trainable: Trainable::None,
                capture: &self.da_layers,
                capture_point: self.method.capture_point,
            },
        )?;
        Ok(read_capture(&tape, &fwd.captured))
    }

    pub fn reference(&self) -> &SourceStats {
        &self.reference
    }

    #[doc(hidden)]
    pub fn model_mut(&mut self) -> &mut ModelGraph {
        &mut self.model
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LayerStats;
    use crate::source::SourceLayerStats;

    fn one_layer(m: &[f32], d2: &[f32]) -> SourceStats {
        SourceStats {
            layers: vec![SourceLayerStats {
                layer: 0,
                m_bar: m.to_vec(),
                d2_bar: d2.to_vec(),
            }],
            population: vec![],
        }
    }

    fn capture(layers: &[(usize, &[f32], &[f32])]) -> ChannelStatsCapture {
        ChannelStatsCapture {
            layers: layers
                .iter()
                .map(|&(layer, m, v)| LayerStats {
                    layer,
                    mean: m.to_vec(),
                    var: v.to_vec(),
                })
                .collect(),
        }
    }

    #[test]
    fn da_loss_hand_case() {
        let r = one_layer(&[0.5, 1.0], &[2.0, 0.5]);
        let c = capture(&[(0, &[1.0, 2.0], &[1.0, 1.0])]);
        assert!((da_loss(&c, &r).unwrap() - 1.5).abs() < 1e-7);
    }

    #[test]
    fn da_loss_zero_on_perfect_alignment() {
        let r = one_layer(&[0.3, -1.0], &[0.2, 4.0]);
        let c = capture(&[(0, &[0.3, -1.0], &[0.2, 4.0])]);
        assert_eq!(da_loss(&c, &r).unwrap(), 0.0);
    }

    #[test]
    fn da_loss_averages_layers() {
        let r = SourceStats {
            layers: vec![
                SourceLayerStats {
                    layer: 0,
                    m_bar: vec![0.0],
                    d2_bar: vec![0.0],
                },
                SourceLayerStats {
                    layer: 1,
                    m_bar: vec![0.0],
                    d2_bar: vec![0.0],
                },
            ],
            population: vec![],
        };
        let c = capture(&[(0, &[1.0], &[0.0]), (1, &[2.0], &[1.0])]);
        assert_eq!(da_loss(&c, &r).unwrap(), 2.0);
    }

    #[test]
    fn da_loss_rejects_mismatch() {
        let r = one_layer(&[0.0, 0.0], &[0.0, 0.0]);
        let c = capture(&[(0, &[1.0], &[0.0])]);
        assert!(matches!(da_loss(&c, &r), Err(EngineError::StatsMismatch(_))));
        let c = capture(&[(1, &[1.0, 1.0], &[0.0, 0.0])]);
        assert!(matches!(da_loss(&c, &r), Err(EngineError::StatsMismatch(_))));
    }

    #[test]
    fn em_loss_cases() {
        let uniform = Tensor::zeros(&[3, 5]);
        let (l, n) = em_loss(&uniform, 0.0).unwrap();
        assert_eq!(n, 3);
        assert!((l - 3.0 * 5f32.ln()).abs() < 1e-5);
        let (l, n) = em_loss(&uniform, 1.0).unwrap();
        assert_eq!((l, n), (0.0, 0));
        let confident = Tensor::new(vec![1, 3], vec![60.0, 0.0, 0.0]).unwrap();
        let (l, n) = em_loss(&confident, 0.5).unwrap();
        assert_eq!(n, 1);
        assert!(l.abs() < 1e-20);
    }

    #[test]
    fn layer_selection() {
        assert_eq!(DaLayerSelection::All.layers(2), vec![0, 1]);
        assert_eq!(DaLayerSelection::LowHalf.layers(2), vec![0]);
        assert_eq!(DaLayerSelection::HighHalf.layers(2), vec![1]);
        assert_eq!(DaLayerSelection::HighHalf.layers(1), vec![0]);
        assert_eq!(DaLayerSelection::LowHalf.layers(4), vec![0, 1]);
    }

    #[test]
    fn config_validation() {
        assert!(MethodConfig::default().validate().is_ok());
        let bad = MethodConfig {
            alpha: 1.5,
            ..MethodConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = MethodConfig {
            momentum: 1.0,
            ..MethodConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
