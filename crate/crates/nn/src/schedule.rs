use std::f64::consts::PI;

use crate::error::{NnError, Result};

/// Linear warmup from 0 to `peak_lr`, then cosine decay to 0 at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak_lr: f32,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(peak_lr: f32, warmup_steps: u64, total_steps: u64) -> Result<Self> {
        if warmup_steps > total_steps {
            return Err(NnError::invalid(
                "LrSchedule",
                format!("warmup {warmup_steps} exceeds total {total_steps}"),
            ));
        }
        Ok(Self {
            peak_lr,
            warmup_steps,
            total_steps,
        })
    }

    pub fn lr_at(&self, step: u64) -> Result<f32> {
        if step > self.total_steps {
            return Err(NnError::StepOutOfRange {
                step,
                total: self.total_steps,
            });
        }
        let peak = self.peak_lr as f64;
        if step < self.warmup_steps {
            return Ok((peak * step as f64 / self.warmup_steps as f64) as f32);
        }
        let span = self.total_steps - self.warmup_steps;
        if span == 0 {
            return Ok(self.peak_lr);
        }
        let progress = (step - self.warmup_steps) as f64 / span as f64;
        Ok((peak * 0.5 * (1.0 + (PI * progress).cos())) as f32)
    }
}
