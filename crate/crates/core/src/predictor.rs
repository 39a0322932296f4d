//! Exponential moving average of each expert's per-step token load, and the
//! hot/warm/cold classes derived from it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{ActivationTrace, ClassifyThresholds, ExpertClass};

pub const DEFAULT_ALPHA: f64 = 0.3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PredictorError {
    #[error("decision accuracy needs at least 2 steps, trace has {0}")]
    TooFewSteps(usize),
    #[error("alpha must lie in (0, 1], got {0}")]
    InvalidAlpha(f64),
}

/// One expert's predictor metadata.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EmaCell {
    pub ema: f64,
    pub last: f64,
    pub initialized: bool,
}

/// EMA state for the routed experts of a single layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPredictor {
    pub alpha: f64,
    pub cells: Vec<EmaCell>,
}

impl LayerPredictor {
    pub fn new(alpha: f64, num_experts: usize) -> Result<Self, PredictorError> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(PredictorError::InvalidAlpha(alpha));
        }
        Ok(Self { alpha, cells: vec![EmaCell::default(); num_experts] })
    }

    /// `ema ← α·F + (1−α)·ema`; the first observation seeds the average.
    pub fn update<T: Copy + Into<f64>>(&mut self, loads: &[T]) {
        debug_assert_eq!(loads.len(), self.cells.len());
        let a = self.alpha;
        for (cell, &f) in self.cells.iter_mut().zip(loads) {
            let f: f64 = f.into();
            cell.ema = if cell.initialized { a * f + (1.0 - a) * cell.ema } else { f };
            cell.last = f;
            cell.initialized = true;
        }
    }

    pub fn ema(&self, expert: usize) -> f64 {
        self.cells[expert].ema
    }

    pub fn emas(&self) -> impl Iterator<Item = f64> + '_ {
        self.cells.iter().map(|c| c.ema)
    }

    pub fn is_initialized(&self) -> bool {
        self.cells.iter().all(|c| c.initialized)
    }

    pub fn predict_classes(&self, thresholds: &ClassifyThresholds) -> Vec<ExpertClass> {
        self.cells.iter().map(|c| thresholds.classify(c.ema)).collect()
    }
}

/// Predictor for every layer of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorState {
    pub layers: Vec<LayerPredictor>,
}

impl PredictorState {
    pub fn new(alpha: f64, num_layers: usize, num_experts: usize) -> Result<Self, PredictorError> {
        let layer = LayerPredictor::new(alpha, num_experts)?;
        Ok(Self { layers: vec![layer; num_layers] })
    }

    pub fn update_step(&mut self, layers: &[Vec<u32>]) {
        for (p, loads) in self.layers.iter_mut().zip(layers) {
            p.update(loads);
        }
    }
}

/// Fraction of (step, layer, expert) triples whose class predicted after
/// observing steps `..t` matches the class of the actual load at step `t`.
pub fn decision_accuracy(
    trace: &ActivationTrace,
    alpha: f64,
    thresholds: &ClassifyThresholds,
) -> Result<f64, PredictorError> {
    if trace.steps.len() < 2 {
        return Err(PredictorError::TooFewSteps(trace.steps.len()));
    }
    let mut state = PredictorState::new(alpha, trace.num_layers(), trace.num_experts)?;
    state.update_step(&trace.steps[0].layers);
    let (mut hits, mut total) = (0u64, 0u64);
    for step in &trace.steps[1..] {
        for (p, loads) in state.layers.iter().zip(&step.layers) {
            for (cell, &load) in p.cells.iter().zip(loads) {
                hits += (thresholds.classify(cell.ema) == thresholds.classify(load as f64)) as u64;
                total += 1;
            }
        }
        state.update_step(&step.layers);
    }
    Ok(hits as f64 / total as f64)
}
