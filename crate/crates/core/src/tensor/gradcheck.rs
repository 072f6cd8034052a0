//! Central finite-difference verification of backward rules (64-bit only).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{no_grad, Tensor};
use crate::error::{Error, Result};

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-6;

/// Outcome of one gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn new(op_name: impl Into<String>, max_rel_error: f64, tolerance: f64) -> Self {
        Self {
            op_name: op_name.into(),
            max_rel_error,
            tolerance,
            // NaN compares false, so a NaN error fails.
            passed: max_rel_error <= tolerance,
        }
    }
}

/// Compares autodiff against central differences for every coordinate of
/// every input. `f` must map the inputs to a scalar.
///
/// Relative error per coordinate is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn gradcheck<F>(op_name: &str, inputs: &[Tensor<f64>], tolerance: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    gradcheck_sampled(op_name, inputs, tolerance, None, 0, f)
}

/// Like [`gradcheck`], but checks at most `max_coords` randomly chosen
/// coordinates per input when given.
pub fn gradcheck_sampled<F>(
    op_name: &str,
    inputs: &[Tensor<f64>],
    tolerance: f64,
    max_coords: Option<usize>,
    seed: u64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let leaves: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|t| t.detach().with_requires_grad(true))
        .collect();
    let out = f(&leaves)?;
    if out.numel() != 1 {
        return Err(Error::NonScalarBackward(out.shape().to_vec()));
    }
    out.backward()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
        let coords: Vec<usize> = match max_coords {
            Some(k) if k < leaf.numel() => sample(&mut rng, leaf.numel(), k).into_vec(),
            _ => (0..leaf.numel()).collect(),
        };
        for j in coords {
            let eval = |delta: f64| -> Result<f64> {
                let mut data = leaf.to_vec();
                data[j] += delta;
                let mut args: Vec<Tensor<f64>> = leaves.iter().map(|t| t.detach()).collect();
                args[i] = Tensor::new(leaf.shape(), data)?;
                Ok(no_grad(|| f(&args))?.item())
            };
            let numeric = (eval(FD_STEP)? - eval(-FD_STEP)?) / (2.0 * FD_STEP);
            let a = analytic[j];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            worst = if rel.is_nan() { f64::NAN } else { worst.max(rel) };
            if worst.is_nan() {
                break;
            }
        }
    }
    Ok(GradCheckReport::new(op_name, worst, tolerance))
}
