//! Per-step scalar schedules: distillation weight, learning rate, EMA momentum.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::AlphaSchedule;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub step: usize,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub alpha_max: f64,
    pub alpha_schedule: AlphaSchedule,
    pub base_lr: f64,
    pub ema_base: f64,
    pub ema_final: f64,
}

impl ScheduleState {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::config("schedule.total_steps", "must be positive"));
        }
        if self.step > self.total_steps {
            return Err(Error::config(
                "schedule.step",
                format!("{} exceeds total_steps {}", self.step, self.total_steps),
            ));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(Error::config(
                "schedule.warmup",
                format!(
                    "{} warmup steps must be fewer than {} total steps",
                    self.warmup_steps, self.total_steps
                ),
            ));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::config("schedule.lr", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.ema_base) {
            return Err(Error::config("schedule.ema_base", "must lie in [0, 1)"));
        }
        if !(self.ema_final > self.ema_base && self.ema_final <= 1.0) {
            return Err(Error::config(
                "schedule.ema_final",
                "must lie in (ema_base, 1]",
            ));
        }
        if !(self.alpha_max >= 0.0) {
            return Err(Error::config("loss.alpha_max", "must be >= 0"));
        }
        Ok(())
    }

    pub fn at(&self, step: usize) -> ScheduleState {
        ScheduleState {
            step,
            ..self.clone()
        }
    }

    fn progress(&self) -> f64 {
        self.step as f64 / self.total_steps as f64
    }
}

/// Half-cosine ramp `alpha_max · (1 − cos(π·t/T)) / 2`, or the constant `alpha_max`.
pub fn alpha_at(state: &ScheduleState) -> f64 {
    match state.alpha_schedule {
        AlphaSchedule::Constant => state.alpha_max,
        AlphaSchedule::Cosine => {
            if state.step >= state.total_steps {
                return state.alpha_max;
            }
            state.alpha_max * (1.0 - (PI * state.progress()).cos()) / 2.0
        }
    }
}

/// Linear warmup from 0 to `base_lr`, then cosine decay to 0.
pub fn lr_at(state: &ScheduleState) -> f64 {
    let (t, w, total) = (state.step, state.warmup_steps, state.total_steps);
    if t < w {
        return state.base_lr * t as f64 / w as f64;
    }
    if t >= total {
        return 0.0;
    }
    let p = (t - w) as f64 / (total - w) as f64;
    state.base_lr * 0.5 * (1.0 + (PI * p).cos())
}

/// Cosine increase from `ema_base` to `ema_final`.
pub fn ema_momentum_at(state: &ScheduleState) -> f64 {
    if state.step >= state.total_steps {
        return state.ema_final;
    }
    let c = (1.0 + (PI * state.progress()).cos()) / 2.0;
    state.ema_final - (state.ema_final - state.ema_base) * c
}
