use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum LrSchedule {
    Constant,
    /// Linear warm-up from `floor` to the base rate over `warmup` steps, then
    /// cosine decay back to `floor` at the final step.
    Cosine { warmup: usize, floor: f64 },
}

impl LrSchedule {
    pub fn rate(&self, base: f64, step: usize, total_steps: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine { warmup, floor } => {
                if step < warmup {
                    floor + (base - floor) * (step as f64 + 1.0) / warmup as f64
                } else {
                    let span = total_steps.saturating_sub(warmup).max(1) as f64;
                    let progress = ((step - warmup) as f64 / span).min(1.0);
                    floor + 0.5 * (base - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
                }
            }
        }
    }
}

/// First/second moment estimates and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { first: vec![0.0; len], second: vec![0.0; len], step: 0 }
    }

    /// One AdamW update of `params` in place. `decay_mask[i]` selects which
    /// parameters receive decoupled weight decay.
    pub fn update(
        &mut self,
        params: &mut [f64],
        grads: &[f64],
        lr: f64,
        betas: (f64, f64),
        weight_decay: f64,
        decay_mask: &[bool],
    ) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() || decay_mask.len() != params.len() {
            return Err(Error::shape("optimizer state and parameters differ in size"));
        }
        self.step += 1;
        let (b1, b2) = betas;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.first[i] = b1 * self.first[i] + (1.0 - b1) * g;
            self.second[i] = b2 * self.second[i] + (1.0 - b2) * g * g;
            let m_hat = self.first[i] / c1;
            let v_hat = self.second[i] / c2;
            let mut delta = m_hat / (v_hat.sqrt() + ADAM_EPS);
            if decay_mask[i] {
                delta += weight_decay * params[i];
            }
            params[i] -= lr * delta;
        }
        Ok(())
    }
}

/// Multiplicative ℓ1 weight update toward a target mean ℓ0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct L1Controller {
    pub gain: f64,
    pub deadband: f64,
    pub floor: f64,
}

impl Default for L1Controller {
    fn default() -> Self {
        Self { gain: 0.003, deadband: 0.01, floor: 1e-8 }
    }
}

impl L1Controller {
    pub fn update(&self, current_l0: f64, target_l0: f64, l1_weight: f64) -> f64 {
        let w = if (current_l0 - target_l0).abs() <= self.deadband {
            l1_weight
        } else if current_l0 > target_l0 {
            l1_weight * (1.0 + self.gain)
        } else {
            l1_weight * (1.0 - self.gain)
        };
        w.max(self.floor)
    }
}

/// Default controller step: ×1.003 above target, ×0.997 below, unchanged
/// within ±0.01, never below 1e-8.
pub fn adaptive_l1_controller(current_l0: f64, target_l0: f64, l1_weight: f64) -> f64 {
    L1Controller::default().update(current_l0, target_l0, l1_weight)
}
