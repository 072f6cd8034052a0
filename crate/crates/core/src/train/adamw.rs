use super::OptimConfig;
use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamRegistry};
use crate::tensor::Scalar;

/// AdamW with decoupled weight decay. Moment buffers are indexed like the
/// registry; frozen parameters keep empty buffers.
#[derive(Debug, Clone)]
pub struct AdamW<T: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    /// Number of updates taken so far.
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: &OptimConfig, reg: &ParamRegistry<T>) -> Self {
        let zeros = |p: &crate::nn::Param<T>| if p.frozen { Vec::new() } else { vec![T::zero(); p.tensor.numel()] };
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            clip_norm: cfg.clip_norm,
            step: 0,
            m: reg.iter().map(|(_, p)| zeros(p)).collect(),
            v: reg.iter().map(|(_, p)| zeros(p)).collect(),
        }
    }

    /// Updates the parameters in `ids` from their gradient buffers. Every
    /// listed trainable parameter must carry a gradient.
    pub fn step(&mut self, reg: &mut ParamRegistry<T>, ids: &[ParamId], lr: f64) -> Result<()> {
        let mut grads = Vec::with_capacity(ids.len());
        for &id in ids {
            let p = reg.param(id);
            if p.frozen {
                continue;
            }
            let g = p.tensor.grad().ok_or_else(|| {
                Error::invalid("adamw", format!("missing gradient for trainable parameter `{}`", p.name))
            })?;
            grads.push((id, g));
        }
        let clip_scale = match self.clip_norm {
            Some(max) => {
                let norm = grads
                    .iter()
                    .flat_map(|(_, g)| g.iter())
                    .map(|g| g.as_f64() * g.as_f64())
                    .sum::<f64>()
                    .sqrt();
                if norm > max { max / norm } else { 1.0 }
            }
            None => 1.0,
        };

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::c(self.beta1), T::c(self.beta2));
        let (one_b1, one_b2) = (T::c(1.0 - self.beta1), T::c(1.0 - self.beta2));
        let (lr_t, eps) = (T::c(lr), T::c(self.eps));
        let (bc1, bc2) = (T::c(bc1), T::c(bc2));
        let clip = T::c(clip_scale);
        for (id, g) in grads {
            let idx = id.index();
            let p = reg.param(id);
            let decay = if p.decay { T::c(lr * self.weight_decay) } else { T::zero() };
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            let data: Vec<T> = p
                .tensor
                .data()
                .iter()
                .zip(&g)
                .enumerate()
                .map(|(i, (&w, &g))| {
                    let g = g * clip;
                    m[i] = b1 * m[i] + one_b1 * g;
                    v[i] = b2 * v[i] + one_b2 * g * g;
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    let w = w - decay * w;
                    w - lr_t * m_hat / (v_hat.sqrt() + eps)
                })
                .collect();
            reg.set_data(id, data)?;
        }
        Ok(())
    }
}
