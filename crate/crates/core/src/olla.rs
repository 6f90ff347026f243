//! Outer-loop link adaptation.
//!
//! A per-device additive rate offset driven by ACK/NACK feedback. At the
//! fixed point the NACK ratio equals the target BLER.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::phy::{Feedback, McsTable};

/// Upper clamp on the corrective term, bits/symbol.
pub const DELTA_CEILING: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OllaState {
    delta: Vec<f64>,
    step: f64,
    target: f64,
    floor: f64,
}

impl OllaState {
    /// `floor` is the most negative offset allowed (usually `−r_max`).
    pub fn new(devices: usize, step: f64, target: f64, floor: f64) -> Result<Self> {
        if !(step > 0.0) {
            return Err(invalid(format!("OLLA step must be positive, got {step}")));
        }
        if !(target > 0.0 && target < 1.0) {
            return Err(invalid(format!("OLLA target {target} outside (0, 1)")));
        }
        Ok(Self { delta: vec![0.0; devices], step, target, floor: floor.min(0.0) })
    }

    pub fn delta(&self, device: usize) -> f64 {
        self.delta[device]
    }

    pub fn deltas(&self) -> &[f64] {
        &self.delta
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    /// `Δ ← Δ + ι(ε_max − F)/(1 − ε_max)`, clamped to `[floor, DELTA_CEILING]`.
    pub fn update(&mut self, device: usize, feedback: Feedback) {
        let f = feedback.failure_indicator();
        let d = &mut self.delta[device];
        *d += self.step * (self.target - f) / (1.0 - self.target);
        *d = d.clamp(self.floor, DELTA_CEILING);
    }

    pub fn reset(&mut self) {
        self.delta.iter_mut().for_each(|d| *d = 0.0);
    }
}

/// Applies the corrective term to a requested rate.
///
/// Continuous mode clamps at zero; with an MCS table the corrected rate is
/// floored onto the grid.
pub fn apply(rate: f64, delta: f64, table: Option<&McsTable>) -> f64 {
    let corrected = rate + delta;
    match table {
        None => corrected.max(0.0),
        Some(t) => t.floor(corrected).rate,
    }
}
