//! Memory-rate schedule and the stage layout of a run.

use serde::{Deserialize, Serialize};

/// R(t) = 1 - min(e/E_k * tau, tau): starts at 1, decays linearly for E_k
/// epochs, then stays at the floor 1 - tau.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MemorySchedule {
    pub e_k: usize,
    pub tau: f64,
}

impl MemorySchedule {
    pub fn memory_rate(&self, epoch: usize) -> f64 {
        1.0 - (epoch as f64 / self.e_k as f64 * self.tau).min(self.tau)
    }
}

/// Epoch counts per training stage. The curriculum computation between
/// warm-up and correction is a single pass, not an epoch range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stage1: usize,
    pub stage3: usize,
    pub stage4: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Mutual warm-up on observed labels.
    Warmup,
    /// Joint parameter + label-distribution training.
    Correction,
    /// Fine-tuning against the frozen corrected labels.
    FineTune,
}

impl Stage {
    /// Stage number as reported in metrics (2 is the curriculum pass).
    pub fn id(&self) -> u8 {
        match self {
            Stage::Warmup => 1,
            Stage::Correction => 3,
            Stage::FineTune => 4,
        }
    }
}

impl StagePlan {
    pub fn total(&self) -> usize {
        self.stage1 + self.stage3 + self.stage4
    }

    pub fn stage_of(&self, epoch: usize) -> Stage {
        if epoch < self.stage1 {
            Stage::Warmup
        } else if epoch < self.stage1 + self.stage3 {
            Stage::Correction
        } else {
            Stage::FineTune
        }
    }

    /// Half-open epoch range of the correction stage.
    pub fn stage3_range(&self) -> (usize, usize) {
        (self.stage1, self.stage1 + self.stage3)
    }
}
