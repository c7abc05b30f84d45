//! Deterministic image corruptions with five severity levels.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum CorruptionError {
    #[error("unknown corruption kind {0:?}")]
    UnknownKind(String),
    #[error("severity must be in 1..=5, got {0}")]
    Severity(u8),
    #[error("image must be [C, H, W], got {0:?}")]
    Shape(Vec<usize>),
    #[error("pixel value {0} outside [0, 1]")]
    Range(f32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ImpulseNoise,
    Contrast,
    BoxBlur,
    Brightness,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 5] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::Contrast,
        CorruptionKind::BoxBlur,
        CorruptionKind::Brightness,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::BoxBlur => "box_blur",
            CorruptionKind::Brightness => "brightness",
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = CorruptionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| CorruptionError::UnknownKind(s.to_string()))
    }
}

pub const GAUSSIAN_SIGMA: [f32; 5] = [0.04, 0.08, 0.12, 0.18, 0.26];
pub const IMPULSE_FRACTION: [f32; 5] = [0.01, 0.03, 0.06, 0.10, 0.17];
pub const CONTRAST_FACTOR: [f32; 5] = [0.75, 0.6, 0.45, 0.3, 0.2];
pub const BLUR_KERNEL: [usize; 5] = [1, 3, 3, 5, 5];
pub const BLUR_PASSES: [usize; 5] = [1, 1, 2, 2, 3];
pub const BRIGHTNESS_SHIFT: [f32; 5] = [0.05, 0.1, 0.15, 0.2, 0.3];

fn default_severity() -> u8 {
    5
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    #[serde(default = "default_severity")]
    pub severity: u8,
    #[serde(default)]
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8, seed: u64) -> Self {
        Self { kind, severity, seed }
    }

    pub fn validate(&self) -> Result<(), CorruptionError> {
        if (1..=5).contains(&self.severity) {
            Ok(())
        } else {
            Err(CorruptionError::Severity(self.severity))
        }
    }
}

/// Corrupt one `[C, H, W]` image with values in `[0, 1]`. The result is clipped
/// to `[0, 1]` and depends only on `(spec, image)`.
pub fn corrupt(image: &Tensor, spec: &CorruptionSpec) -> Result<Tensor, CorruptionError> {
    spec.validate()?;
    let [c, h, w] = image.shape()[..] else {
        return Err(CorruptionError::Shape(image.shape().to_vec()));
    };
    if let Some(&bad) = image.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(CorruptionError::Range(bad));
    }
    let s = (spec.severity - 1) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let out: Vec<f32> = match spec.kind {
        CorruptionKind::GaussianNoise => {
            let noise = Normal::new(0.0f32, GAUSSIAN_SIGMA[s]).expect("positive std");
            image.data().iter().map(|&v| v + noise.sample(&mut rng)).collect()
        }
        CorruptionKind::ImpulseNoise => {
            let frac = IMPULSE_FRACTION[s] as f64;
            image
                .data()
                .iter()
                .map(|&v| {
                    if rng.random_bool(frac) {
                        if rng.random_bool(0.5) {
                            1.0
                        } else {
                            0.0
                        }
                    } else {
                        v
                    }
                })
                .collect()
        }
        CorruptionKind::Contrast => {
            let f = CONTRAST_FACTOR[s];
            image.data().iter().map(|&v| (v - 0.5) * f + 0.5).collect()
        }
        CorruptionKind::BoxBlur => {
            let mut d = image.data().to_vec();
            for _ in 0..BLUR_PASSES[s] {
                d = box_blur(&d, c, h, w, BLUR_KERNEL[s]);
            }
            d
        }
        CorruptionKind::Brightness => image.data().iter().map(|&v| v + BRIGHTNESS_SHIFT[s]).collect(),
    };
    let out = out.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Ok(Tensor::new(vec![c, h, w], out).expect("same size"))
}

/// Separable box filter; windows are truncated at the border and averaged over
/// the pixels they cover.
fn box_blur(d: &[f32], c: usize, h: usize, w: usize, k: usize) -> Vec<f32> {
    if k <= 1 {
        return d.to_vec();
    }
    let r = (k / 2) as isize;
    let mut tmp = vec![0.0f32; d.len()];
    let mut out = vec![0.0f32; d.len()];
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h {
            for x in 0..w {
                let (mut s, mut n) = (0.0f64, 0);
                for dx in -r..=r {
                    let xx = x as isize + dx;
                    if (0..w as isize).contains(&xx) {
                        s += d[base + y * w + xx as usize] as f64;
                        n += 1;
                    }
                }
                tmp[base + y * w + x] = (s / n as f64) as f32;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let (mut s, mut n) = (0.0f64, 0);
                for dy in -r..=r {
                    let yy = y as isize + dy;
                    if (0..h as isize).contains(&yy) {
                        s += tmp[base + yy as usize * w + x] as f64;
                        n += 1;
                    }
                }
                out[base + y * w + x] = (s / n as f64) as f32;
            }
        }
    }
    out
}
