//! Labeled image datasets: on-disk layout and the synthetic grating generator.
//!
//! A dataset directory holds `images.datt` (a single `images` record of shape
//! `[n, C, H, W]` in the tensor-record format) and `labels.txt` (one integer
//! per line).

use std::f32::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::format::{self, FormatError, RecordSet};
use crate::tensor::Tensor;

pub const IMAGES_FILE: &str = "images.datt";
pub const LABELS_FILE: &str = "labels.txt";

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: invalid label {text:?}")]
    BadLabel { path: String, line: usize, text: String },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("images must be rank 4, got {0:?}")]
    BadShape(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self, DataError> {
        if images.rank() != 4 {
            return Err(DataError::BadShape(images.shape().to_vec()));
        }
        if images.shape()[0] != labels.len() {
            return Err(DataError::CountMismatch {
                images: images.shape()[0],
                labels: labels.len(),
            });
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// `[C, H, W]` of one sample.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let stride: usize = self.sample_shape().iter().product();
        &self.images.data()[i * stride..(i + 1) * stride]
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            images: self.images.gather_outer(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn save_dir(&self, dir: &Path) -> Result<(), DataError> {
        let io = |source| DataError::Io {
            path: dir.display().to_string(),
            source,
        };
        fs::create_dir_all(dir).map_err(io)?;
        format::write_file(&dir.join(IMAGES_FILE), &[("images".to_string(), self.images.clone())])?;
        let mut text = String::with_capacity(self.labels.len() * 3);
        for l in &self.labels {
            text.push_str(&l.to_string());
            text.push('\n');
        }
        let path = dir.join(LABELS_FILE);
        fs::write(&path, text).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load_dir(dir: &Path) -> Result<Self, DataError> {
        let mut set = RecordSet::new(format::read_file(&dir.join(IMAGES_FILE))?);
        let images = set.take("images")?;
        set.finish()?;
        let path = dir.join(LABELS_FILE);
        let text = fs::read_to_string(&path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let labels = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                l.trim().parse::<usize>().map_err(|_| DataError::BadLabel {
                    path: path.display().to_string(),
                    line: i + 1,
                    text: l.to_string(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(images, labels)
    }
}

/// Procedural K-class texture dataset: each class is an oriented sinusoidal
/// grating with its own orientation, spatial frequency and tint; samples get
/// random phase plus small orientation, frequency, amplitude and pixel jitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Orientation jitter in radians (uniform ±).
    pub orientation_jitter: f32,
    /// Per-pixel Gaussian noise std.
    pub pixel_noise: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            channels: 3,
            height: 16,
            width: 16,
            orientation_jitter: 0.12,
            pixel_noise: 0.02,
        }
    }
}

struct ClassTexture {
    orientation: f32,
    /// cycles per image width
    frequency: f32,
    tint: Vec<f32>,
}

fn class_texture(k: usize, cfg: &SynthConfig) -> ClassTexture {
    let n_orient = cfg.num_classes.div_ceil(2).max(1);
    let orientation = PI * (k % n_orient) as f32 / n_orient as f32;
    let frequency = if k / n_orient == 0 { 2.0 } else { 4.0 };
    let tint = (0..cfg.channels)
        .map(|c| 0.7 + 0.3 * ((k + c) % 3) as f32 / 2.0)
        .collect();
    ClassTexture {
        orientation,
        frequency,
        tint,
    }
}

/// Generate `n` samples with labels cycling through the classes, deterministic in `seed`.
pub fn generate(cfg: &SynthConfig, n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f32, cfg.pixel_noise.max(0.0)).expect("finite std");
    let textures: Vec<_> = (0..cfg.num_classes).map(|k| class_texture(k, cfg)).collect();
    let (c, h, w) = (cfg.channels, cfg.height, cfg.width);
    let mut data = Vec::with_capacity(n * c * h * w);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % cfg.num_classes;
        let tex = &textures[k];
        let theta = tex.orientation + rng.random_range(-1.0..=1.0) * cfg.orientation_jitter;
        let freq = tex.frequency * rng.random_range(0.93..1.07);
        let phase = rng.random_range(0.0..2.0 * PI);
        let amp = rng.random_range(0.3..0.42);
        let bg = 0.5 + rng.random_range(-0.05..0.05);
        let (ct, st) = (theta.cos(), theta.sin());
        let omega = 2.0 * PI * freq / w as f32;
        for tint in &tex.tint {
            for y in 0..h {
                for x in 0..w {
                    let u = x as f32 * ct + y as f32 * st;
                    let v = bg + amp * tint * (omega * u + phase).sin() + noise.sample(&mut rng);
                    data.push(v.clamp(0.0, 1.0));
                }
            }
        }
        labels.push(k);
    }
    let images = Tensor::new(vec![n, c, h, w], data).expect("sized");
    Dataset { images, labels }
}
