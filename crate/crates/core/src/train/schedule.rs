use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparsify::SparsifierConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phase {
    pub sparsifier: SparsifierConfig,
    pub steps: u64,
}

/// Ordered phases plus the SGD hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub phases: Vec<Phase>,
    pub lr: f64,
    /// Multiplier applied once per epoch from `decay_start_epoch` on.
    pub lr_decay: f64,
    pub decay_start_epoch: u64,
    pub clip_norm: f64,
}

impl TrainSchedule {
    /// One identity phase with lr 1, decay 0.5 from the fourth epoch, clip 5.
    pub fn dense(steps: u64) -> Self {
        TrainSchedule {
            phases: vec![Phase {
                sparsifier: SparsifierConfig::Identity,
                steps,
            }],
            lr: 1.0,
            lr_decay: 0.5,
            decay_start_epoch: 4,
            clip_norm: 5.0,
        }
    }

    /// `sparse_fraction` of `steps` (rounded down) with `sparsifier`, the
    /// rest dense. Empty phases are dropped.
    pub fn sparse_then_dense(sparsifier: SparsifierConfig, sparse_fraction: f64, steps: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&sparse_fraction) {
            return Err(Error::Parameter(format!("sparse fraction {sparse_fraction} not in [0, 1]")));
        }
        let sparse = ((steps as f64) * sparse_fraction).floor() as u64;
        let phases = [
            Phase { sparsifier, steps: sparse },
            Phase {
                sparsifier: SparsifierConfig::Identity,
                steps: steps - sparse,
            },
        ]
        .into_iter()
        .filter(|p| p.steps > 0)
        .collect();
        Ok(TrainSchedule {
            phases,
            ..TrainSchedule::dense(steps)
        })
    }

    pub fn total_steps(&self) -> u64 {
        self.phases.iter().map(|p| p.steps).sum()
    }

    /// Learning rate for a zero-based epoch.
    pub fn lr_at_epoch(&self, epoch: u64) -> f64 {
        let exponent = (epoch + 1).saturating_sub(self.decay_start_epoch);
        self.lr * self.lr_decay.powi(exponent.min(i32::MAX as u64) as i32)
    }

    /// Phase index and offset within that phase of a zero-based step.
    pub fn position(&self, step: u64) -> Option<(usize, u64)> {
        let mut start = 0;
        for (i, p) in self.phases.iter().enumerate() {
            if step < start + p.steps {
                return Some((i, step - start));
            }
            start += p.steps;
        }
        None
    }

    pub fn validate(&self, batch: usize, gate_width: usize) -> Result<()> {
        if self.phases.is_empty() || self.total_steps() == 0 {
            return Err(Error::Parameter("schedule has no training steps".into()));
        }
        for p in &self.phases {
            p.sparsifier.validate(batch, gate_width)?;
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Parameter(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.lr_decay.is_finite() && self.lr_decay > 0.0) {
            return Err(Error::Parameter(format!("lr decay must be positive, got {}", self.lr_decay)));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return Err(Error::Parameter(format!("clip norm must be positive, got {}", self.clip_norm)));
        }
        Ok(())
    }
}
