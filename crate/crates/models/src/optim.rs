//! AdamW with linear warmup, cosine decay and global-norm gradient clipping.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub warmup_steps: usize,
    /// Final learning rate as a fraction of `lr`.
    pub final_lr_ratio: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            warmup_steps: 20,
            final_lr_ratio: 0.1,
            weight_decay: 0.0,
            grad_clip: 1.0,
        }
    }
}

impl OptimConfig {
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = total.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        let floor = self.lr * self.final_lr_ratio;
        floor + (self.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

pub struct Trainer {
    opt: AdamW,
    vars: Vec<Var>,
    cfg: OptimConfig,
    total_steps: usize,
    step: usize,
}

impl Trainer {
    pub fn new(vars: Vec<Var>, cfg: &OptimConfig, total_steps: usize) -> Result<Self> {
        let opt = AdamW::new(
            vars.clone(),
            ParamsAdamW {
                lr: cfg.lr_at(0, total_steps),
                weight_decay: cfg.weight_decay,
                ..ParamsAdamW::default()
            },
        )?;
        Ok(Self {
            opt,
            vars,
            cfg: cfg.clone(),
            total_steps,
            step: 0,
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.opt.learning_rate()
    }

    /// Backpropagates `loss`, clips, applies one update and advances the schedule.
    pub fn step(&mut self, loss: &Tensor) -> Result<()> {
        let mut grads = loss.backward()?;
        self.clip(&mut grads)?;
        self.opt.step(&grads)?;
        self.step += 1;
        self.opt.set_learning_rate(self.cfg.lr_at(self.step, self.total_steps));
        Ok(())
    }

    fn clip(&self, grads: &mut GradStore) -> Result<()> {
        if self.cfg.grad_clip <= 0.0 {
            return Ok(());
        }
        let mut total = 0f64;
        for v in &self.vars {
            if let Some(g) = grads.get(v.as_tensor()) {
                total += g.sqr()?.sum_all()?.to_scalar::<f32>()? as f64;
            }
        }
        let norm = total.sqrt();
        if norm > self.cfg.grad_clip {
            let scale = self.cfg.grad_clip / norm;
            for v in &self.vars {
                if let Some(g) = grads.remove(v.as_tensor()) {
                    grads.insert(v.as_tensor(), (g * scale)?);
                }
            }
        }
        Ok(())
    }
}
