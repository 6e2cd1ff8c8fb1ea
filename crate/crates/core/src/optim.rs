//! SGD with momentum and decoupled-into-gradient weight decay, plus learning
//! rate schedules.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, config_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f32,
    pub weight_decay: f32,
    pub momentum: f32,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig { learning_rate: 0.1, weight_decay: 5e-4, momentum: 0.9 }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(config_err!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(config_err!("weight decay must be non-negative, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(config_err!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        Ok(())
    }
}

/// One SGD step over a flat parameter slice:
///
/// `v <- momentum * v + (g + weight_decay * w)`, then `w <- w - lr * v`.
///
/// Nothing is written if any gradient is non-finite.
pub fn sgd_update(params: &mut [f32], grads: &[f32], velocity: &mut [f32], lr: f32, weight_decay: f32, momentum: f32) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(crate::error::shape_err!(
            "sgd: {} params, {} grads, {} velocity entries",
            params.len(),
            grads.len(),
            velocity.len()
        ));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(alloc::format!("gradient entry {i} is {}", grads[i])));
    }
    for ((w, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + (*g + weight_decay * *w);
        *w -= lr * *v;
    }
    Ok(())
}

/// Optimizer state: configuration plus one velocity buffer per parameter
/// tensor, created lazily in registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: SgdConfig,
    velocity: Vec<Vec<f32>>,
}

impl OptimizerState {
    pub fn new(config: SgdConfig) -> Result<Self> {
        config.validate()?;
        Ok(OptimizerState { config, velocity: Vec::new() })
    }

    /// Velocity buffer for parameter tensor `slot`, sized `len`.
    pub fn velocity(&mut self, slot: usize, len: usize) -> &mut [f32] {
        while self.velocity.len() <= slot {
            self.velocity.push(Vec::new());
        }
        let v = &mut self.velocity[slot];
        if v.len() != len {
            v.clear();
            v.resize(len, 0.0);
        }
        v
    }

    /// Applies one step to parameter tensor `slot` at learning rate `lr`.
    pub fn step(&mut self, slot: usize, params: &mut [f32], grads: &[f32], lr: f32) -> Result<()> {
        let (wd, mom) = (self.config.weight_decay, self.config.momentum);
        let v = self.velocity(slot, params.len());
        sgd_update(params, grads, v, lr, wd, mom)
    }
}

/// Learning-rate schedule shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ScheduleKind {
    Constant,
    /// Half-cosine decay from `base_lr` to zero.
    Cosine,
    /// Multiply by `gamma` at each milestone step.
    Step { milestones: Vec<usize>, gamma: f32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub kind: ScheduleKind,
    pub base_lr: f32,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(kind: ScheduleKind, base_lr: f32, total_steps: usize) -> Result<Self> {
        if !(base_lr > 0.0) || !base_lr.is_finite() {
            return Err(config_err!("base learning rate must be positive, got {base_lr}"));
        }
        if total_steps == 0 {
            return Err(config_err!("schedule needs at least one step"));
        }
        Ok(LrSchedule { kind, base_lr, total_steps })
    }

    pub fn cosine(base_lr: f32, total_steps: usize) -> Result<Self> {
        LrSchedule::new(ScheduleKind::Cosine, base_lr, total_steps)
    }

    pub fn constant(base_lr: f32, total_steps: usize) -> Result<Self> {
        LrSchedule::new(ScheduleKind::Constant, base_lr, total_steps)
    }
}

/// Learning rate at `step`, for `0 <= step <= total_steps`.
pub fn lr_at(schedule: &LrSchedule, step: usize) -> Result<f32> {
    if step > schedule.total_steps {
        return Err(arg_err!("step {step} beyond schedule length {}", schedule.total_steps));
    }
    let base = schedule.base_lr as f64;
    let lr = match &schedule.kind {
        ScheduleKind::Constant => base,
        ScheduleKind::Cosine => {
            let t = step as f64 / schedule.total_steps as f64;
            base * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * t))
        }
        ScheduleKind::Step { milestones, gamma } => {
            let passed = milestones.iter().filter(|m| step >= **m).count() as i32;
            base * libm::pow(*gamma as f64, passed as f64)
        }
    };
    Ok(lr as f32)
}
