use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Decay {
    Geometric,
    Linear,
    Constant,
}

/// Learning rate interpolated from `start` at the first step to `end` at the last.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub start: f64,
    pub end: f64,
    pub decay: Decay,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { start: 0.1, end: 0.0008, decay: Decay::Geometric }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.end > 0.0) || !self.start.is_finite() || self.start < self.end {
            return Err(Error::Config(format!(
                "learning rate schedule needs start >= end > 0, got {} -> {}",
                self.start, self.end
            )));
        }
        Ok(())
    }

    /// Rate at `step` of a run lasting `total` steps.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if total <= 1 || self.decay == Decay::Constant {
            return self.start;
        }
        let last = total - 1;
        if step >= last {
            return self.end;
        }
        let frac = step as f64 / last as f64;
        match self.decay {
            Decay::Geometric => self.start * (self.end / self.start).powf(frac),
            Decay::Linear => self.start + (self.end - self.start) * frac,
            Decay::Constant => unreachable!(),
        }
    }
}
