//! Segmentation metrics from an integer confusion matrix.
//!
//! Classes that appear in neither the ground truth nor the prediction are
//! left out of the mIoU and F1 averages. A class that is present but has a
//! zero denominator (for instance never predicted) scores 0.
//!
//! Class averages are summed as exact fractions of the integer counts and
//! rounded to `f64` once, so every reported value is the correctly rounded
//! ratio.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};

use crate::error::{Error, Result};

fn ratio(num: u64, den: u64) -> BigRational {
    BigRational::new(BigInt::from(num), BigInt::from(den))
}

/// Mean of `num / den` fractions, correctly rounded.
fn exact_mean(fractions: impl Iterator<Item = (u64, u64)>) -> f64 {
    let (sum, n) = fractions.fold((BigRational::zero(), 0u64), |(acc, n), (num, den)| {
        let term = if num == 0 { BigRational::zero() } else { ratio(num, den) };
        (acc + term, n + 1)
    });
    (sum / ratio(n, 1)).to_f64().expect("mean of ratios in [0, 1] is representable")
}

/// `counts[gt][pred]` pixel counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSummary {
    pub miou: f64,
    pub oa: f64,
    pub f1: f64,
}

impl MetricSummary {
    pub const CSV_HEADER: &'static str = "iter,miou,oa,f1";

    pub fn csv_row(&self, iter: usize) -> String {
        format!("{iter},{:e},{:e},{:e}", self.miou, self.oa, self.f1)
    }
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one pixel per position. Positions whose ground truth equals
    /// `ignore_index` are skipped.
    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8], ignore_index: u8) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape("accumulate", &[pred.len()], &[gt.len()]));
        }
        let k = self.classes;
        for (&p, &g) in pred.iter().zip(gt) {
            if g == ignore_index {
                continue;
            }
            if g as usize >= k || p as usize >= k {
                return Err(Error::invalid(
                    "accumulate",
                    format!("class id {} out of range for {k} classes", g.max(p)),
                ));
            }
            self.counts[g as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::invalid("merge", "class counts differ"));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    fn ensure_nonempty(&self) -> Result<()> {
        if self.total() == 0 {
            return Err(Error::invalid("metrics", "confusion matrix is empty"));
        }
        Ok(())
    }

    /// `(tp, fp, fn)` for one class.
    fn class_counts(&self, c: usize) -> (u64, u64, u64) {
        let tp = self.get(c, c);
        let row: u64 = (0..self.classes).map(|p| self.get(c, p)).sum();
        let col: u64 = (0..self.classes).map(|g| self.get(g, c)).sum();
        (tp, col - tp, row - tp)
    }

    fn present(&self) -> impl Iterator<Item = (u64, u64, u64)> + '_ {
        (0..self.classes)
            .map(|c| self.class_counts(c))
            .filter(|&(tp, fp, fn_)| tp + fp + fn_ > 0)
    }

    /// IoU per class; `None` for classes absent from both gt and prediction.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let (tp, fp, fn_) = self.class_counts(c);
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    pub fn miou(&self) -> Result<f64> {
        self.ensure_nonempty()?;
        Ok(exact_mean(self.present().map(|(tp, fp, fn_)| (tp, tp + fp + fn_))))
    }

    pub fn oa(&self) -> Result<f64> {
        self.ensure_nonempty()?;
        let trace: u64 = (0..self.classes).map(|c| self.get(c, c)).sum();
        Ok(trace as f64 / self.total() as f64)
    }

    /// Macro-averaged F1. Per class, `2PR / (P + R)` reduces to
    /// `2tp / (2tp + fp + fn)`, which is 0 whenever `tp` is.
    pub fn f1(&self) -> Result<f64> {
        self.ensure_nonempty()?;
        Ok(exact_mean(self.present().map(|(tp, fp, fn_)| (2 * tp, 2 * tp + fp + fn_))))
    }

    pub fn summary(&self) -> Result<MetricSummary> {
        Ok(MetricSummary {
            miou: self.miou()?,
            oa: self.oa()?,
            f1: self.f1()?,
        })
    }
}
