//! Domain-shift detection on the per-batch DA loss.
//!
//! A shift is flagged when the mean of the last `p` losses exceeds `tau` times
//! the mean of the last `q` losses. Both windows end at the current batch, so
//! the long window contains the short one.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{AdaptationState, EngineError};
use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum DetectorError {
    #[error("DA loss must be finite and non-negative, got {0}")]
    BadObservation(f64),
    #[error("invalid detector config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    /// Short window length `p`.
    pub short_window: usize,
    /// Long window length `q > p`.
    pub long_window: usize,
    /// Threshold factor `tau > 1`.
    pub tau: f64,
    /// Observations required (since start or last reset) before any detection; `>= q`.
    pub warmup: usize,
    /// Observations suppressed after a reset.
    pub cooldown: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            short_window: 4,
            long_window: 32,
            tau: 1.5,
            warmup: 32,
            cooldown: 32,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), DetectorError> {
        let bad = |m: &str| Err(DetectorError::Config(m.to_string()));
        if self.short_window < 1 {
            return bad("short_window must be at least 1");
        }
        if self.long_window <= self.short_window {
            return bad("long_window must exceed short_window");
        }
        if !(self.tau > 1.0 && self.tau.is_finite()) {
            return bad("tau must be greater than 1");
        }
        if self.warmup < self.long_window {
            return bad("warmup must be at least long_window");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    NoShift,
    ShiftDetected,
}

#[derive(Debug, Clone)]
pub struct ShiftDetector {
    cfg: DetectorConfig,
    buffer: VecDeque<f64>,
    since_reset: usize,
    total: usize,
    cooldown_left: usize,
    last_reset: Option<usize>,
}

impl ShiftDetector {
    pub fn new(cfg: DetectorConfig) -> Result<Self, DetectorError> {
        cfg.validate()?;
        Ok(Self {
            buffer: VecDeque::with_capacity(cfg.long_window),
            cfg,
            since_reset: 0,
            total: 0,
            cooldown_left: 0,
            last_reset: None,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    pub fn buffered(&self) -> impl Iterator<Item = f64> + '_ {
        self.buffer.iter().copied()
    }

    /// Observation index (0-based, counting all observations) of the last reset.
    pub fn last_reset(&self) -> Option<usize> {
        self.last_reset
    }

    pub fn observe(&mut self, l_da: f64) -> Result<Decision, DetectorError> {
        if !(l_da >= 0.0 && l_da.is_finite()) {
            return Err(DetectorError::BadObservation(l_da));
        }
        if self.buffer.len() == self.cfg.long_window {
            self.buffer.pop_front();
        }
        self.buffer.push_back(l_da);
        self.since_reset += 1;
        self.total += 1;
        if self.cooldown_left > 0 {
            self.cooldown_left -= 1;
            return Ok(Decision::NoShift);
        }
        if self.since_reset < self.cfg.warmup {
            return Ok(Decision::NoShift);
        }
        let p = self.cfg.short_window;
        let q = self.cfg.long_window;
        let short = self.buffer.iter().rev().take(p).sum::<f64>() / p as f64;
        let long = self.buffer.iter().rev().take(q).sum::<f64>() / q as f64;
        Ok(if short > self.cfg.tau * long {
            Decision::ShiftDetected
        } else {
            Decision::NoShift
        })
    }

    /// Clear the window and start the cooldown.
    pub fn reset(&mut self) {
        self.buffer.clear();
        self.since_reset = 0;
        self.cooldown_left = self.cfg.cooldown;
        self.last_reset = Some(self.total.saturating_sub(1));
    }
}

/// React to a detected shift on `batch`: reset the adaptation state (affine
/// parameters, optimizer velocity, first-batch blend on `batch`) and the detector.
pub fn on_shift(state: &mut AdaptationState, detector: &mut ShiftDetector, batch: &Tensor) -> Result<(), EngineError> {
    state.reset(batch)?;
    detector.reset();
    Ok(())
}
