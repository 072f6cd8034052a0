//! Plain-loop reference implementations used as oracles by the integration
//! tests. None of these go through the tensor engine.

#![allow(dead_code)]

use num_rational::Ratio;
use num_traits::ToPrimitive;

/// A `[B,C,H,W]` map as flat data plus its shape.
#[derive(Debug, Clone)]
pub struct Map {
    pub shape: [usize; 4],
    pub data: Vec<f64>,
}

impl Map {
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        let [_, ch, h, w] = self.shape;
        self.data[((b * ch + c) * h + y) * w + x]
    }
}

pub fn mse(student: &[Map], teacher: &[Map]) -> f64 {
    let per_scale: Vec<f64> = student
        .iter()
        .zip(teacher)
        .map(|(s, t)| {
            let sq: f64 = s.data.iter().zip(&t.data).map(|(a, b)| (a - b) * (a - b)).sum();
            sq / s.data.len() as f64
        })
        .collect();
    per_scale.iter().sum::<f64>() / per_scale.len() as f64
}

fn channel_softmax(m: &Map, b: usize, y: usize, x: usize) -> Vec<f64> {
    let c = m.shape[1];
    let v: Vec<f64> = (0..c).map(|k| m.at(b, k, y, x)).collect();
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|a| (a - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|a| a / z).collect()
}

/// Mean over scales of the mean over locations of `sum_c p log(p / q)`,
/// with `p` the student's and `q` the teacher's channel softmax.
pub fn kl(student: &[Map], teacher: &[Map]) -> f64 {
    let per_scale: Vec<f64> = student
        .iter()
        .zip(teacher)
        .map(|(s, t)| {
            let [bs, _, h, w] = s.shape;
            let mut total = 0.0;
            for b in 0..bs {
                for y in 0..h {
                    for x in 0..w {
                        let p = channel_softmax(s, b, y, x);
                        let q = channel_softmax(t, b, y, x);
                        total += p.iter().zip(&q).map(|(pi, qi)| pi * (pi / qi).ln()).sum::<f64>();
                    }
                }
            }
            total / (bs * h * w) as f64
        })
        .collect();
    per_scale.iter().sum::<f64>() / per_scale.len() as f64
}

/// Mean negative log-likelihood over non-ignored pixels.
pub fn cross_entropy(logits: &Map, target: &[u8], ignore: u8) -> f64 {
    let [bs, k, h, w] = logits.shape;
    let (mut total, mut n) = (0.0, 0usize);
    for b in 0..bs {
        for y in 0..h {
            for x in 0..w {
                let t = target[(b * h + y) * w + x];
                if t == ignore {
                    continue;
                }
                let v: Vec<f64> = (0..k).map(|c| logits.at(b, c, y, x)).collect();
                let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + v.iter().map(|a| (a - max).exp()).sum::<f64>().ln();
                total += lse - v[t as usize];
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

/// Metrics by direct pixel enumeration: `(miou, oa, f1)`.
pub fn brute_force_metrics(pred: &[u8], gt: &[u8], classes: usize, ignore: u8) -> (f64, f64, f64) {
    let scored: Vec<(u8, u8)> = pred.iter().zip(gt).filter(|(_, &g)| g != ignore).map(|(&p, &g)| (p, g)).collect();
    let correct = scored.iter().filter(|(p, g)| p == g).count();
    let oa = correct as f64 / scored.len() as f64;
    let mut iou_sum = Ratio::<i128>::from_integer(0);
    let mut f1_sum = Ratio::<i128>::from_integer(0);
    let mut present = 0i128;
    for c in 0..classes as u8 {
        let tp = scored.iter().filter(|&&(p, g)| p == c && g == c).count() as i128;
        let fp = scored.iter().filter(|&&(p, g)| p == c && g != c).count() as i128;
        let fn_ = scored.iter().filter(|&&(p, g)| p != c && g == c).count() as i128;
        if tp + fp + fn_ == 0 {
            continue;
        }
        present += 1;
        if tp > 0 {
            iou_sum += Ratio::new(tp, tp + fp + fn_);
            // 2PR/(P+R) with P = tp/(tp+fp), R = tp/(tp+fn).
            let p = Ratio::new(tp, tp + fp);
            let r = Ratio::new(tp, tp + fn_);
            f1_sum += Ratio::from_integer(2) * p * r / (p + r);
        }
    }
    let mean = |s: Ratio<i128>| (s / present).to_f64().unwrap();
    (mean(iou_sum), oa, mean(f1_sum))
}

/// PolyLR with linear warmup, written from the closed form.
pub fn poly_lr(iter: usize, base: f64, warmup: usize, max: usize, power: f64, min: f64) -> f64 {
    if iter < warmup {
        base * (iter + 1) as f64 / warmup as f64
    } else {
        let progress = (iter - warmup) as f64 / (max - warmup) as f64;
        min + (base - min) * (1.0 - progress).powf(power)
    }
}
