use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleShape {
    WarmupCosine,
}

/// Learning-rate schedule shared by every trainer in a run, indexed by the
/// global (sequential) optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub alpha: f64,
    pub eta_max: f64,
    pub total_steps: u64,
    #[serde(default = "default_shape")]
    pub shape: ScheduleShape,
}

fn default_shape() -> ScheduleShape {
    ScheduleShape::WarmupCosine
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("schedule.alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !(self.eta_max > 0.0 && self.eta_max.is_finite()) {
            return Err(Error::Config("schedule.eta_max must be positive".into()));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("schedule.total_steps must be positive".into()));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> u64 {
        // the epsilon keeps alpha*T from rounding up past an exact integer
        ((self.alpha * self.total_steps as f64) - 1e-9).ceil().max(0.0) as u64
    }
}

/// Linear warmup to `eta_max` over `ceil(alpha*T)` steps, cosine decay to
/// `alpha*eta_max` at step `T`, constant afterwards.
pub fn lr_at(step: u64, sched: &ScheduleConfig) -> f64 {
    let floor = sched.alpha * sched.eta_max;
    let warmup = sched.warmup_steps();
    let total = sched.total_steps;
    match sched.shape {
        ScheduleShape::WarmupCosine => {
            if step >= total {
                floor
            } else if step < warmup {
                sched.eta_max * step as f64 / warmup as f64
            } else {
                let progress = (step - warmup) as f64 / (total - warmup) as f64;
                floor + (sched.eta_max - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}
