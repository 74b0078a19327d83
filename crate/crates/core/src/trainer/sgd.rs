//! Momentum SGD with coupled L2 weight decay and a step learning-rate schedule.

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::nets::layers::Param;

/// `base_lr · gamma^k` where `k` counts the steps with `iter >= step`.
pub fn lr_at(cfg: &TrainConfig, iter: u64) -> f64 {
    let passed = cfg.lr_steps.iter().filter(|&&s| iter >= s).count();
    cfg.base_lr * cfg.lr_gamma.powi(passed as i32)
}

/// Velocity buffers keyed by parameter position.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new() -> Self {
        Self::default()
    }

    /// `v ← μ·v + lr·(g + wd·w)`, `w ← w − v`; weight decay only where the
    /// parameter opts in. Any non-finite gradient aborts before touching state.
    pub fn step(&mut self, params: Vec<&mut Param>, cfg: &TrainConfig, iter: u64) -> Result<()> {
        for p in &params {
            if p.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    iteration: iter,
                    layer: p.name.clone(),
                });
            }
        }
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        let lr = lr_at(cfg, iter);
        for (p, v) in params.into_iter().zip(&mut self.velocity) {
            let wd = if p.decay { cfg.weight_decay } else { 0.0 };
            for ((w, g), vi) in p.value.iter_mut().zip(&p.grad).zip(v.iter_mut()) {
                *vi = cfg.momentum * *vi + lr * (g + wd * *w);
                *w -= *vi;
            }
        }
        Ok(())
    }
}
