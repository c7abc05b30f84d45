//! Offline source preparation: supervised training with running BN statistics,
//! then extraction of per-channel source reference statistics.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tape;
use crate::data::Dataset;
use crate::format::{self, FormatError, RecordSet};
use crate::model::{ArchSpec, BnMode, CapturePoint, ModelError, ModelGraph, TapeOptions, Trainable};
use crate::optim::SgdMomentum;
use crate::tensor::TensorError;

/// Momentum of the exponential moving average of BN population statistics.
pub const BN_EMA_MOMENTUM: f32 = 0.1;

#[derive(Debug, Error)]
pub enum SourceError {
    #[error("source dataset is empty")]
    EmptyDataset,
    #[error("source dataset needs at least 2 classes, found {0}")]
    TooFewClasses(usize),
    #[error("label {label} outside the {classes} model classes")]
    LabelRange { label: usize, classes: usize },
    #[error("training diverged at epoch {epoch}, step {step}: {source}")]
    Diverged {
        epoch: usize,
        step: usize,
        #[source]
        source: TensorError,
    },
    #[error("batch size must be positive")]
    BatchSize,
    #[error("stats cover layers {stats:?} but the model uses {model:?}")]
    LayerMismatch { stats: Vec<usize>, model: Vec<usize> },
    #[error("stats layer {layer}: {detail}")]
    Channels { layer: usize, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            lr: 0.05,
            momentum: 0.9,
            batch_size: 64,
            seed: 0,
        }
    }
}

/// Train every parameter with cross-entropy. BN layers normalize with batch
/// statistics during training and accumulate population statistics by EMA;
/// the returned model normalizes with those population statistics.
pub fn train_source(dataset: &Dataset, arch: &ArchSpec, cfg: &TrainConfig) -> Result<ModelGraph, SourceError> {
    if dataset.is_empty() {
        return Err(SourceError::EmptyDataset);
    }
    let classes = dataset.num_classes();
    if dataset.labels().iter().collect::<std::collections::BTreeSet<_>>().len() < 2 {
        return Err(SourceError::TooFewClasses(classes.min(1)));
    }
    if classes > arch.num_classes {
        return Err(SourceError::LabelRange {
            label: classes - 1,
            classes: arch.num_classes,
        });
    }
    if cfg.batch_size == 0 {
        return Err(SourceError::BatchSize);
    }
    let mut model = ModelGraph::new(arch, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0F50_u64);
    let mut opt = SgdMomentum::new(cfg.lr, cfg.momentum);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let diverged = |source| SourceError::Diverged { epoch, step, source };
            model.set_bn_mode(BnMode::BatchStats);
            let batch = dataset.images().gather_outer(idx);
            let labels: Vec<usize> = idx.iter().map(|&i| dataset.labels()[i]).collect();
            let mut tape = Tape::new();
            let x = tape.constant(batch).map_err(diverged)?;
            let fwd = model
                .forward_on_tape(
                    &mut tape,
                    x,
                    &TapeOptions {
                        trainable: Trainable::All,
                        capture: &[],
                        capture_point: CapturePoint::PostAffine,
                    },
                )
                .map_err(|e| match e {
                    ModelError::Tensor(t) => diverged(t),
                    other => other.into(),
                })?;
            let loss = tape.cross_entropy(fwd.logits, &labels).map_err(diverged)?;
            let mut wrt: Vec<_> = fwd.affine.iter().flat_map(|&(g, b)| [g, b]).collect();
            wrt.extend(&fwd.weights);
            let grads = tape.backward(loss, &wrt).map_err(diverged)?;
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(diverged(TensorError::NonFinite { op: "backward" }));
            }

            let (affine_grads, weight_grads) = grads.split_at(2 * fwd.affine.len());
            let batch_stats = fwd.batch_stats;
            apply_update(&mut model, &mut opt, affine_grads, weight_grads);
            for (bn, stats) in model.bn_layers_mut().zip(&batch_stats) {
                if let Some((mu, var)) = stats {
                    ema(&mut bn.mu_popu, mu);
                    ema(&mut bn.sigma2_popu, var);
                }
            }
        }
    }
    for bn in model.bn_layers_mut() {
        bn.use_population();
    }
    Ok(model)
}

fn apply_update(
    model: &mut ModelGraph,
    opt: &mut SgdMomentum,
    affine_grads: &[crate::tensor::Tensor],
    weight_grads: &[crate::tensor::Tensor],
) {
    let mut affine: Vec<(Vec<f32>, Vec<f32>)> = model.affine_snapshot();
    let mut weights: Vec<Vec<f32>> = model.frozen_weights().iter().map(|t| t.data().to_vec()).collect();
    {
        let mut params: Vec<&mut [f32]> = Vec::new();
        for (g, b) in affine.iter_mut() {
            params.push(g);
            params.push(b);
        }
        for w in weights.iter_mut() {
            params.push(w);
        }
        let grads: Vec<&[f32]> = affine_grads.iter().chain(weight_grads).map(|g| g.data()).collect();
        opt.step(&mut params, &grads);
    }
    model.restore_affine(&affine);
    for (dst, src) in model.frozen_weights_mut().into_iter().zip(weights) {
        dst.data_mut().copy_from_slice(&src);
    }
}

fn ema(running: &mut [f32], batch: &[f32]) {
    for (r, &b) in running.iter_mut().zip(batch) {
        *r = (1.0 - BN_EMA_MOMENTUM) * *r + BN_EMA_MOMENTUM * b;
    }
}

/// Source reference statistics of one DA layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceLayerStats {
    pub layer: usize,
    pub m_bar: Vec<f32>,
    pub d2_bar: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceStats {
    pub layers: Vec<SourceLayerStats>,
    /// `(mu_popu, sigma2_popu)` per BN layer.
    pub population: Vec<(Vec<f32>, Vec<f32>)>,
}

impl SourceStats {
    pub fn layer_ids(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.layer).collect()
    }

    /// Restrict to the given DA layers.
    pub fn subset(&self, layers: &[usize]) -> Result<SourceStats, SourceError> {
        let picked = layers
            .iter()
            .map(|&l| {
                self.layers
                    .iter()
                    .find(|s| s.layer == l)
                    .cloned()
                    .ok_or_else(|| SourceError::LayerMismatch {
                        stats: self.layer_ids(),
                        model: layers.to_vec(),
                    })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(SourceStats {
            layers: picked,
            population: self.population.clone(),
        })
    }

    /// Check that the layer set equals the model's DA layers and channel counts agree.
    pub fn check_against(&self, model: &ModelGraph) -> Result<(), SourceError> {
        let ids = self.layer_ids();
        if ids != model.da_layers() {
            return Err(SourceError::LayerMismatch {
                stats: ids,
                model: model.da_layers().to_vec(),
            });
        }
        if self.population.len() != model.bn_count() {
            return Err(SourceError::Channels {
                layer: self.population.len(),
                detail: format!("population statistics for {} BN layers, model has {}", self.population.len(), model.bn_count()),
            });
        }
        for l in &self.layers {
            let c = model.bn_layer(l.layer).map_or(0, |b| b.channels());
            if l.m_bar.len() != c || l.d2_bar.len() != c {
                return Err(SourceError::Channels {
                    layer: l.layer,
                    detail: format!("{} channels in stats, {c} in model", l.m_bar.len()),
                });
            }
        }
        Ok(())
    }

    pub fn to_records(&self) -> Vec<(String, crate::tensor::Tensor)> {
        use crate::tensor::Tensor;
        let mut recs = vec![("meta.layers".to_string(), format::index_tensor(&self.layer_ids()))];
        for l in &self.layers {
            recs.push((format!("src.{}.m_bar", l.layer), Tensor::from_vec(l.m_bar.clone())));
            recs.push((format!("src.{}.d2_bar", l.layer), Tensor::from_vec(l.d2_bar.clone())));
        }
        for (i, (mu, var)) in self.population.iter().enumerate() {
            recs.push((format!("popu.{i}.mu"), Tensor::from_vec(mu.clone())));
            recs.push((format!("popu.{i}.sigma2"), Tensor::from_vec(var.clone())));
        }
        recs
    }

    pub fn from_records(records: Vec<(String, crate::tensor::Tensor)>) -> Result<Self, SourceError> {
        let mut set = RecordSet::new(records);
        let ids = set.take("meta.layers")?;
        let ids = format::tensor_indices("meta.layers", &ids)?;
        let mut layers = Vec::with_capacity(ids.len());
        for &layer in &ids {
            let m_bar = set.take(&format!("src.{layer}.m_bar"))?;
            let d2_bar = set.take_shaped(&format!("src.{layer}.d2_bar"), m_bar.shape())?;
            if d2_bar.data().iter().any(|&v| !(v >= 0.0)) {
                return Err(FormatError::Invalid(format!("src.{layer}.d2_bar has negative entries")).into());
            }
            layers.push(SourceLayerStats {
                layer,
                m_bar: m_bar.into_data(),
                d2_bar: d2_bar.into_data(),
            });
        }
        let mut population = Vec::new();
        let n_popu = set.names().filter(|n| n.starts_with("popu.") && n.ends_with(".mu")).count();
        for i in 0..n_popu {
            let mu = set.take(&format!("popu.{i}.mu"))?;
            let var = set.take_shaped(&format!("popu.{i}.sigma2"), mu.shape())?;
            if var.data().iter().any(|&v| !(v >= 0.0)) {
                return Err(FormatError::Invalid(format!("popu.{i}.sigma2 has negative entries")).into());
            }
            population.push((mu.into_data(), var.into_data()));
        }
        set.finish()?;
        Ok(Self { layers, population })
    }

    pub fn save(&self, path: &Path) -> Result<(), SourceError> {
        Ok(format::write_file(path, &self.to_records())?)
    }

    pub fn load(path: &Path) -> Result<Self, SourceError> {
        Self::from_records(format::read_file(path)?)
    }

    /// Load and validate against `model`.
    pub fn load_for(path: &Path, model: &ModelGraph) -> Result<Self, SourceError> {
        let s = Self::load(path)?;
        s.check_against(model)?;
        Ok(s)
    }
}

/// Average per-sample channel statistics of every DA layer over `dataset`, with
/// BN normalizing by population statistics.
pub fn compute_source_stats(model: &ModelGraph, dataset: &Dataset, batch_size: usize) -> Result<SourceStats, SourceError> {
    if dataset.is_empty() {
        return Err(SourceError::EmptyDataset);
    }
    if batch_size == 0 {
        return Err(SourceError::BatchSize);
    }
    let mut inference = model.clone();
    for bn in inference.bn_layers_mut() {
        bn.use_population();
    }
    let da = inference.da_layers().to_vec();
    let mut sums: Vec<(Vec<f64>, Vec<f64>)> = da
        .iter()
        .map(|&l| {
            let c = inference.bn_layer(l).map_or(0, |b| b.channels());
            (vec![0.0; c], vec![0.0; c])
        })
        .collect();
    let n = dataset.len();
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        let batch = dataset.images().slice_outer(start, end);
        let stats = inference.forward(&batch, true)?.stats.expect("capture requested");
        let weight = (end - start) as f64;
        for (acc, ls) in sums.iter_mut().zip(&stats.layers) {
            for (a, &v) in acc.0.iter_mut().zip(&ls.mean) {
                *a += weight * v as f64;
            }
            for (a, &v) in acc.1.iter_mut().zip(&ls.var) {
                *a += weight * v as f64;
            }
        }
        start = end;
    }
    let layers = da
        .iter()
        .zip(sums)
        .map(|(&layer, (m, d2))| SourceLayerStats {
            layer,
            m_bar: m.iter().map(|v| (v / n as f64) as f32).collect(),
            d2_bar: d2.iter().map(|v| (v / n as f64) as f32).collect(),
        })
        .collect();
    let population = inference
        .bn_layers()
        .map(|b| (b.mu_popu.clone(), b.sigma2_popu.clone()))
        .collect();
    Ok(SourceStats { layers, population })
}
