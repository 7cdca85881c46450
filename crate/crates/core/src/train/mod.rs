//! Optimization: learning-rate schedules, Adam with decoupled weight
//! decay, gradient clipping, per-language batching and the training loop.

mod optim;
mod sampler;
mod trainer;

pub use optim::{adam_step, clip_grad_norm, lr_at, AdamState};
pub use sampler::{LanguageScheduler, TrainData};
pub use trainer::{evaluate_loss, StepReport, Trainer, TrainerState};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    CosineDecay,
    LinearDecay,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub warmup_steps: u64,
    pub peak_lr: f32,
    pub schedule: Schedule,
    /// Sequences per optimizer step.
    pub batch_size: usize,
    /// Sequences per single-language micro-batch.
    pub micro_batch_size: usize,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub aux_loss_alpha: f32,
    pub grad_clip: f32,
    pub seed: u64,
    pub eval_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 100_000,
            warmup_steps: 1_000,
            peak_lr: 1.5e-4,
            schedule: Schedule::CosineDecay,
            batch_size: 8,
            micro_batch_size: 4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            aux_loss_alpha: 0.01,
            grad_clip: 1.0,
            seed: 0,
            eval_interval: 1_000,
        }
    }
}

impl TrainConfig {
    /// Fine-tuning defaults: linear decay from 5e-5.
    pub fn finetune() -> Self {
        Self {
            peak_lr: 5e-5,
            schedule: Schedule::LinearDecay,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            if self.warmup_steps != 0 {
                return Err(Error::config("warmup_steps must be 0 when steps is 0"));
            }
        } else if self.warmup_steps >= self.steps {
            return Err(Error::config("warmup_steps must be below steps"));
        }
        if !(self.peak_lr > 0.0) {
            return Err(Error::config("peak_lr must be positive"));
        }
        if self.micro_batch_size == 0 || self.batch_size == 0 || !self.batch_size.is_multiple_of(self.micro_batch_size) {
            return Err(Error::config("batch_size must be a positive multiple of micro_batch_size"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::config("invalid Adam hyperparameters"));
        }
        if self.weight_decay < 0.0 || self.aux_loss_alpha < 0.0 || !(self.grad_clip > 0.0) {
            return Err(Error::config("weight_decay, aux_loss_alpha must be >= 0 and grad_clip > 0"));
        }
        if self.eval_interval == 0 {
            return Err(Error::config("eval_interval must be positive"));
        }
        Ok(())
    }

    pub fn micro_batches(&self) -> usize {
        self.batch_size / self.micro_batch_size
    }
}
