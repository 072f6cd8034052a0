//! Fused softmax, layer normalization and pixel-wise cross-entropy.

use super::ops::split_axis;
use super::{BackwardArgs, Scalar, Tensor};
use crate::error::{Error, Result};

/// Result of [`Tensor::cross_entropy`].
#[derive(Debug, Clone)]
pub struct CrossEntropy<T: Scalar> {
    pub loss: Tensor<T>,
    /// Number of scored (non-ignored) positions.
    pub valid: usize,
    /// Set when every position was ignored; `loss` is then exactly 0.
    pub degenerate: bool,
}

impl<T: Scalar> Tensor<T> {
    fn check_axis(&self, op: &'static str, axis: usize) -> Result<(usize, usize, usize)> {
        if axis >= self.rank() {
            return Err(Error::invalid(op, format!("axis {axis} out of range for {:?}", self.shape())));
        }
        Ok(split_axis(self.shape(), axis))
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        let (outer, len, inner) = self.check_axis("softmax", axis)?;
        let x = self.data();
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * len + a) * inner + i;
                let m = (0..len).map(|a| x[idx(a)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for a in 0..len {
                    let e = (x[idx(a)] - m).exp();
                    out[idx(a)] = e;
                    z += e;
                }
                for a in 0..len {
                    out[idx(a)] /= z;
                }
            }
        }
        Ok(Tensor::from_op(
            "softmax",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |args: &BackwardArgs<'_, T>| {
                let (s, g) = (args.output, args.grad);
                let mut gx = vec![T::zero(); s.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |a: usize| (o * len + a) * inner + i;
                        let dot: T = (0..len).map(|a| g[idx(a)] * s[idx(a)]).sum();
                        for a in 0..len {
                            gx[idx(a)] = s[idx(a)] * (g[idx(a)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Tensor<T>> {
        let (outer, len, inner) = self.check_axis("log_softmax", axis)?;
        let x = self.data();
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * len + a) * inner + i;
                let m = (0..len).map(|a| x[idx(a)]).fold(T::neg_infinity(), T::max);
                let lse = m + (0..len).map(|a| (x[idx(a)] - m).exp()).sum::<T>().ln();
                for a in 0..len {
                    out[idx(a)] = x[idx(a)] - lse;
                }
            }
        }
        Ok(Tensor::from_op(
            "log_softmax",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |args: &BackwardArgs<'_, T>| {
                let (y, g) = (args.output, args.grad);
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |a: usize| (o * len + a) * inner + i;
                        let gsum: T = (0..len).map(|a| g[idx(a)]).sum();
                        for a in 0..len {
                            gx[idx(a)] = g[idx(a)] - y[idx(a)].exp() * gsum;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Normalizes the last axis, then applies `gamma * x_hat + beta`.
    /// Rows with zero variance normalize to exactly zero.
    pub fn layer_norm(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        let d = *self
            .shape()
            .last()
            .ok_or_else(|| Error::invalid("layer_norm", "scalar input"))?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::shape("layer_norm", self.shape(), gamma.shape()));
        }
        let rows = self.numel() / d.max(1);
        let eps = T::c(eps);
        let dn = T::from_usize(d).unwrap();
        let x = self.data();
        let (gm, bt) = (gamma.data(), beta.data());
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let constant = row.iter().all(|&v| v == row[0]);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = if constant { T::zero() } else { (row[j] - mean) * is };
                xhat[r * d + j] = h;
                out[r * d + j] = h * gm[j] + bt[j];
            }
        }
        Ok(Tensor::from_op(
            "layer_norm",
            self.shape().to_vec(),
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |args: &BackwardArgs<'_, T>| {
                let (xp, gp, bp) = (&args.parents[0], &args.parents[1], &args.parents[2]);
                let gm = gp.data();
                let g = args.grad;
                let mut gx = xp.requires_grad().then(|| vec![T::zero(); g.len()]);
                let mut ggamma = gp.requires_grad().then(|| vec![T::zero(); d]);
                let mut gbeta = bp.requires_grad().then(|| vec![T::zero(); d]);
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    if let Some(gg) = ggamma.as_mut() {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                    if let Some(gb) = gbeta.as_mut() {
                        for j in 0..d {
                            gb[j] += gr[j];
                        }
                    }
                    if let Some(gx) = gx.as_mut() {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..d {
                            let dh = gr[j] * gm[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh /= dn;
                        mean_dh_h /= dn;
                        for j in 0..d {
                            let dh = gr[j] * gm[j];
                            gx[r * d + j] = inv_std[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
                vec![gx, ggamma, gbeta]
            }),
        ))
    }

    /// Mean negative log-likelihood over positions of `[B,K,...]` logits.
    /// `targets` holds one class id per position (`B * prod(...)` entries);
    /// entries equal to `ignore_index` are skipped.
    pub fn cross_entropy(&self, targets: &[u8], ignore_index: u8) -> Result<CrossEntropy<T>> {
        let s = self.shape();
        if s.len() < 2 {
            return Err(Error::invalid("cross_entropy", format!("logits must be [B,K,...], got {s:?}")));
        }
        let (batch, classes) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        if targets.len() != batch * inner {
            return Err(Error::invalid(
                "cross_entropy",
                format!("{} targets for logits {s:?}", targets.len()),
            ));
        }
        if let Some(&bad) = targets
            .iter()
            .find(|&&t| t != ignore_index && t as usize >= classes)
        {
            return Err(Error::invalid(
                "cross_entropy",
                format!("class id {bad} out of range for {classes} classes"),
            ));
        }
        let x = self.data();
        let valid = targets.iter().filter(|&&t| t != ignore_index).count();
        let mut probs = vec![T::zero(); x.len()];
        let mut total = T::zero();
        for b in 0..batch {
            for i in 0..inner {
                let t = targets[b * inner + i];
                if t == ignore_index {
                    continue;
                }
                let idx = |k: usize| (b * classes + k) * inner + i;
                let m = (0..classes).map(|k| x[idx(k)]).fold(T::neg_infinity(), T::max);
                let z: T = (0..classes).map(|k| (x[idx(k)] - m).exp()).sum();
                for k in 0..classes {
                    probs[idx(k)] = (x[idx(k)] - m).exp() / z;
                }
                total += m + z.ln() - x[idx(t as usize)];
            }
        }
        let loss = if valid == 0 {
            T::zero()
        } else {
            total / T::from_usize(valid).unwrap()
        };
        let targets = targets.to_vec();
        let tensor = Tensor::from_op(
            "cross_entropy",
            Vec::new(),
            vec![loss],
            vec![self.clone()],
            Box::new(move |args: &BackwardArgs<'_, T>| {
                let mut g = vec![T::zero(); batch * classes * inner];
                if valid == 0 {
                    return vec![Some(g)];
                }
                let scale = args.grad[0] / T::from_usize(valid).unwrap();
                for b in 0..batch {
                    for i in 0..inner {
                        let t = targets[b * inner + i];
                        if t == ignore_index {
                            continue;
                        }
                        for k in 0..classes {
                            let idx = (b * classes + k) * inner + i;
                            let onehot = if k == t as usize { T::one() } else { T::zero() };
                            g[idx] = (probs[idx] - onehot) * scale;
                        }
                    }
                }
                vec![Some(g)]
            }),
        );
        Ok(CrossEntropy {
            loss: tensor,
            valid,
            degenerate: valid == 0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_constant_is_uniform() {
        let s = Tensor::<f64>::full(&[2, 4], 3.0).softmax(1).unwrap();
        assert!(s.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn softmax_normalizes_along_axis() {
        let x = Tensor::<f64>::uniform(&[3, 5, 4], -5.0, 5.0, &mut rand::rng());
        let s = x.softmax(1).unwrap();
        for o in 0..3 {
            for i in 0..4 {
                let total: f64 = (0..5).map(|a| s.data()[(o * 5 + a) * 4 + i]).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
        assert!(s.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = Tensor::<f64>::full(&[2, 6], 0.1);
        let y = x
            .layer_norm(&Tensor::ones(&[6]), &Tensor::zeros(&[6]), 1e-5)
            .unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_moments() {
        let x = Tensor::<f64>::uniform(&[4, 16], -3.0, 7.0, &mut rand::rng());
        let y = x
            .layer_norm(&Tensor::ones(&[16]), &Tensor::zeros(&[16]), 1e-5)
            .unwrap();
        for r in 0..4 {
            let row = &y.data()[r * 16..(r + 1) * 16];
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let logits = Tensor::<f64>::zeros(&[2, 5, 3, 3]);
        let ce = logits.cross_entropy(&[1; 18], 255).unwrap();
        assert!((ce.loss.item() - 5f64.ln()).abs() < 1e-14);
        assert!(!ce.degenerate);
    }

    #[test]
    fn confident_correct_logit_drives_loss_down() {
        let mut last = f64::INFINITY;
        for margin in [0.0, 1.0, 4.0, 16.0, 64.0] {
            let logits = Tensor::<f64>::from_f64(&[1, 3, 1, 1], &[margin, 0.0, 0.0]).unwrap();
            let l = logits.cross_entropy(&[0], 255).unwrap().loss.item();
            assert!(l < last);
            last = l;
        }
        assert!(last < 1e-20);
    }

    #[test]
    fn all_ignored_is_degenerate_zero() {
        let logits = Tensor::<f64>::uniform(&[1, 4, 2, 2], -1.0, 1.0, &mut rand::rng()).with_requires_grad(true);
        let ce = logits.cross_entropy(&[255; 4], 255).unwrap();
        assert!(ce.degenerate);
        assert_eq!(ce.loss.item(), 0.0);
        ce.loss.backward().unwrap();
        assert!(logits.grad().unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn out_of_range_class_rejected() {
        let logits = Tensor::<f64>::zeros(&[1, 3, 1, 2]);
        assert!(logits.cross_entropy(&[0, 3], 255).is_err());
    }
}
