use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_iters: usize,
    pub max_iters: usize,
    pub poly_power: f64,
    pub min_lr: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_iters: 100,
            max_iters: 2000,
            poly_power: 0.9,
            min_lr: 0.0,
            clip_norm: None,
        }
    }
}

impl OptimConfig {
    /// The full-length schedule: 1150 warmup iterations out of 23000.
    pub fn full_length() -> Self {
        Self {
            warmup_iters: 1150,
            max_iters: 23000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_iters > self.max_iters {
            return Err(Error::config("optim.warmup_iters", "must not exceed optim.max_iters"));
        }
        if self.max_iters == 0 {
            return Err(Error::config("optim.max_iters", "must be >= 1"));
        }
        if !(self.poly_power > 0.0) {
            return Err(Error::config("optim.poly_power", "must be > 0"));
        }
        if !(self.base_lr >= 0.0 && self.min_lr >= 0.0 && self.min_lr <= self.base_lr) {
            return Err(Error::config("optim.base_lr", "need 0 <= min_lr <= base_lr"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("optim.betas", "must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("optim.eps", "eps must be > 0 and weight_decay >= 0"));
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return Err(Error::config("optim.clip_norm", "must be > 0"));
        }
        Ok(())
    }
}

/// Learning rate for iteration `iter` (0-based): a linear ramp from
/// `base_lr / warmup` up to `base_lr`, then polynomial decay to `min_lr`
/// at `max_iters`.
pub fn lr_at(iter: usize, cfg: &OptimConfig) -> Result<f64> {
    if iter > cfg.max_iters {
        return Err(Error::invalid(
            "lr_at",
            format!("iteration {iter} beyond max_iters {}", cfg.max_iters),
        ));
    }
    let w = cfg.warmup_iters;
    if iter < w {
        return Ok(cfg.base_lr * (iter + 1) as f64 / w as f64);
    }
    if cfg.max_iters == w {
        return Ok(cfg.min_lr);
    }
    let progress = (iter - w) as f64 / (cfg.max_iters - w) as f64;
    Ok(cfg.min_lr + (cfg.base_lr - cfg.min_lr) * (1.0 - progress).powf(cfg.poly_power))
}
