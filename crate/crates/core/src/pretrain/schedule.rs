use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub total_steps: usize,
}

impl ScheduleConfig {
    pub fn triangular(peak_lr: f64, warmup_fraction: f64, total_steps: usize) -> Self {
        ScheduleConfig { peak_lr, warmup_fraction, total_steps }
    }

    /// Learning rate of update `k` of `updates`. Evaluated one step into a
    /// schedule of `updates + 1` steps so no update runs at exactly zero.
    pub fn for_update(&self, k: usize) -> f64 {
        let s = ScheduleConfig { total_steps: self.total_steps + 1, ..*self };
        lr_at(k + 1, &s).unwrap_or(0.0)
    }
}

/// Linear warmup to the peak, then linear decay to zero at `total_steps`.
pub fn lr_at(step: usize, s: &ScheduleConfig) -> Result<f64> {
    if step > s.total_steps {
        return Err(Error::invalid(format!("step {step} beyond schedule of {} steps", s.total_steps)));
    }
    if s.total_steps == 0 {
        return Ok(0.0);
    }
    let total = s.total_steps as f64;
    let warm = (s.warmup_fraction.clamp(0.0, 1.0) * total).min(total);
    let t = step as f64;
    Ok(if t < warm {
        s.peak_lr * t / warm
    } else if warm >= total {
        s.peak_lr
    } else {
        s.peak_lr * (total - t) / (total - warm)
    })
}
