//! Training objectives.
//!
//! Knowledge transfer pulls aligned student features toward the teacher
//! (feature MSE plus a channel-softmax KL term). Domain adaptation is
//! cross-entropy on the primary and auxiliary logits. The total objective
//! is `kt_weight * L_kt + da_weight * L_da`.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::{FeaturePyramid, SegOutput};
use crate::tensor::{CrossEntropy, Scalar, Tensor};

pub const IGNORE_INDEX: u8 = 255;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub mse: f64,
    pub kl: f64,
    pub ce: f64,
    pub aux: f64,
    pub kt: f64,
    pub da: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mse: 0.5,
            kl: 0.5,
            ce: 1.0,
            aux: 0.4,
            kt: 1.0,
            da: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("loss.lambda_mse", self.mse),
            ("loss.lambda_kl", self.kl),
            ("loss.lambda_ce", self.ce),
            ("loss.lambda_aux", self.aux),
            ("loss.lambda_kt", self.kt),
            ("loss.lambda_da", self.da),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, format!("must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Which terms take part in the objective. Disabled terms are never built
/// into the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossToggles {
    pub mse: bool,
    pub kl: bool,
    pub ce: bool,
    pub aux: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self {
            mse: true,
            kl: true,
            ce: true,
            aux: true,
        }
    }
}

impl LossToggles {
    pub fn any_kt(&self) -> bool {
        self.mse || self.kl
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub toggles: LossToggles,
    /// Use the per-scale sum of squares instead of the per-element mean.
    pub mse_sum: bool,
}

/// Scalar values of every term for one step. Disabled terms read 0.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub mse: f64,
    pub kl: f64,
    pub kt: f64,
    pub ce: f64,
    pub aux: f64,
    pub da: f64,
    pub total: f64,
    pub enabled: LossToggles,
    /// Set when every pixel of the batch carried the ignore label.
    pub degenerate: bool,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "iter,mse,kl,kt,ce,aux,da,total";

    pub fn csv_row(&self, iter: usize) -> String {
        let mut s = format!("{iter}");
        for v in [self.mse, self.kl, self.kt, self.ce, self.aux, self.da, self.total] {
            write!(s, ",{v:e}").unwrap();
        }
        s
    }
}

fn check_pyramids<T: Scalar>(op: &'static str, s: &FeaturePyramid<T>, t: &FeaturePyramid<T>) -> Result<()> {
    if s.is_empty() || s.len() != t.len() {
        return Err(Error::invalid(op, format!("pyramid lengths {} and {}", s.len(), t.len())));
    }
    for (a, b) in s.iter().zip(t.iter()) {
        if a.shape() != b.shape() {
            return Err(Error::shape(op, a.shape(), b.shape()));
        }
    }
    Ok(())
}

fn mean_over_scales<T: Scalar>(terms: Vec<Tensor<T>>) -> Result<Tensor<T>> {
    let n = terms.len();
    let mut acc = terms[0].clone();
    for t in &terms[1..] {
        acc = acc.add(t)?;
    }
    Ok(acc.scale(T::one() / T::from_usize(n).unwrap()))
}

/// Mean over scales of the per-element mean squared difference.
pub fn mse_loss<T: Scalar>(student: &FeaturePyramid<T>, teacher: &FeaturePyramid<T>) -> Result<Tensor<T>> {
    check_pyramids("mse_loss", student, teacher)?;
    let terms = student
        .iter()
        .zip(teacher.iter())
        .map(|(s, t)| Ok(s.sub(&t.detach())?.square().mean()))
        .collect::<Result<Vec<_>>>()?;
    mean_over_scales(terms)
}

/// Mean over scales of the squared L2 distance (no per-element division).
pub fn mse_sum_loss<T: Scalar>(student: &FeaturePyramid<T>, teacher: &FeaturePyramid<T>) -> Result<Tensor<T>> {
    check_pyramids("mse_loss", student, teacher)?;
    let terms = student
        .iter()
        .zip(teacher.iter())
        .map(|(s, t)| Ok(s.sub(&t.detach())?.square().sum()))
        .collect::<Result<Vec<_>>>()?;
    mean_over_scales(terms)
}

/// `KL(student || teacher)` between channel distributions at each location
/// of `[B,C,H,W]` maps, averaged over locations and scales.
pub fn kl_loss<T: Scalar>(student: &FeaturePyramid<T>, teacher: &FeaturePyramid<T>) -> Result<Tensor<T>> {
    check_pyramids("kl_loss", student, teacher)?;
    let terms = student
        .iter()
        .zip(teacher.iter())
        .map(|(s, t)| {
            if s.rank() < 2 {
                return Err(Error::invalid("kl_loss", format!("expected [B,C,...], got {:?}", s.shape())));
            }
            let log_p = s.log_softmax(1)?;
            let log_q = t.detach().log_softmax(1)?;
            let p = s.softmax(1)?;
            let locations = s.numel() / s.shape()[1];
            Ok(p.mul(&log_p.sub(&log_q)?)?
                .sum()
                .scale(T::one() / T::from_usize(locations).unwrap()))
        })
        .collect::<Result<Vec<_>>>()?;
    mean_over_scales(terms)
}

/// `w.mse * L_mse + w.kl * L_kl`.
pub fn kt_loss<T: Scalar>(
    student: &FeaturePyramid<T>,
    teacher: &FeaturePyramid<T>,
    w: &LossWeights,
) -> Result<Tensor<T>> {
    mse_loss(student, teacher)?
        .scale(T::c(w.mse))
        .add(&kl_loss(student, teacher)?.scale(T::c(w.kl)))
}

/// Pixel-mean cross-entropy of `[B,K,H,W]` logits against a `B*H*W` mask.
pub fn ce_loss<T: Scalar>(logits: &Tensor<T>, target: &[u8], ignore_index: u8) -> Result<CrossEntropy<T>> {
    logits.cross_entropy(target, ignore_index)
}

/// `w.ce * CE(primary) + w.aux * CE(aux)`.
pub fn da_loss<T: Scalar>(y_hat: &Tensor<T>, y_hat_aux: &Tensor<T>, target: &[u8], w: &LossWeights) -> Result<Tensor<T>> {
    let ce = ce_loss(y_hat, target, IGNORE_INDEX)?.loss;
    let aux = ce_loss(y_hat_aux, target, IGNORE_INDEX)?.loss;
    ce.scale(T::c(w.ce)).add(&aux.scale(T::c(w.aux)))
}

fn add_opt<T: Scalar>(acc: Option<Tensor<T>>, term: Tensor<T>) -> Result<Option<Tensor<T>>> {
    Ok(Some(match acc {
        Some(a) => a.add(&term)?,
        None => term,
    }))
}

/// Builds the training objective for one forward pass.
///
/// Returns the differentiable total and the per-term values. Knowledge
/// transfer terms need teacher features, so enabling them on a model
/// without a teacher is an error.
pub fn total_loss<T: Scalar>(out: &SegOutput<T>, target: &[u8], cfg: &LossConfig) -> Result<(Tensor<T>, LossBreakdown)> {
    let tg = cfg.toggles;
    let w = cfg.weights;
    if !(tg.mse || tg.kl || tg.ce || tg.aux) {
        return Err(Error::invalid("total_loss", "all loss terms are disabled"));
    }
    if tg.any_kt() && out.teacher.is_empty() {
        return Err(Error::invalid(
            "total_loss",
            "knowledge-transfer terms need teacher features, but the model has none",
        ));
    }
    let mut bd = LossBreakdown {
        enabled: tg,
        ..LossBreakdown::default()
    };

    let mut kt: Option<Tensor<T>> = None;
    if tg.mse {
        let mse = if cfg.mse_sum {
            mse_sum_loss(&out.aligned, &out.teacher)?
        } else {
            mse_loss(&out.aligned, &out.teacher)?
        };
        bd.mse = mse.item().as_f64();
        kt = add_opt(kt, mse.scale(T::c(w.mse)))?;
    }
    if tg.kl {
        let kl = kl_loss(&out.aligned, &out.teacher)?;
        bd.kl = kl.item().as_f64();
        kt = add_opt(kt, kl.scale(T::c(w.kl)))?;
    }

    let mut da: Option<Tensor<T>> = None;
    if tg.ce {
        let ce = ce_loss(&out.y_hat, target, IGNORE_INDEX)?;
        bd.ce = ce.loss.item().as_f64();
        bd.degenerate |= ce.degenerate;
        da = add_opt(da, ce.loss.scale(T::c(w.ce)))?;
    }
    if tg.aux {
        let aux = ce_loss(&out.y_hat_aux, target, IGNORE_INDEX)?;
        bd.aux = aux.loss.item().as_f64();
        bd.degenerate |= aux.degenerate;
        da = add_opt(da, aux.loss.scale(T::c(w.aux)))?;
    }

    let mut total: Option<Tensor<T>> = None;
    if let Some(kt) = kt {
        bd.kt = kt.item().as_f64();
        total = add_opt(total, kt.scale(T::c(w.kt)))?;
    }
    if let Some(da) = da {
        bd.da = da.item().as_f64();
        total = add_opt(total, da.scale(T::c(w.da)))?;
    }
    let total = total.expect("at least one term is enabled");
    bd.total = total.item().as_f64();
    Ok((total, bd))
}
