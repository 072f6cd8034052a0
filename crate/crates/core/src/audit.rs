//! The gradient audit: finite-difference checks in f64 for every
//! differentiable operation, layer, loss term and the assembled model.
//!
//! Each check reduces its output to a scalar through a fixed random
//! weighting, so reductions that are invariant to their input (the sum of a
//! softmax, say) still exercise the backward rule.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::loss::{ce_loss, da_loss, kl_loss, kt_loss, mse_loss, mse_sum_loss, total_loss, LossConfig, LossWeights, IGNORE_INDEX};
use crate::model::{
    BackboneConfig, FamMode, FeatureAlignment, FeatureModulation, FeaturePyramid, FmmConfig, HeadConfig, ModelConfig,
    SegModel, SegOutput, VtmConfig,
};
use crate::model::{AuxHead, DecoderHead};
use crate::nn::{linear, Conv2d, LayerNorm, Linear, MultiHeadAttention, ParamBuilder, ParamRegistry, TransformerBlock};
use crate::tensor::{gradcheck_sampled, BackwardArgs, GradCheckReport, Tensor};

/// Tolerance for elementwise operations.
pub const ELEMENTWISE_TOL: f64 = 1e-6;
/// Tolerance for everything else.
pub const COMPOSITE_TOL: f64 = 1e-4;

/// Coordinates sampled per input tensor for the larger checks.
const SAMPLED_COORDS: usize = 24;

/// Half-width of the noise added to parameters before checking modules.
const PARAM_JITTER: f64 = 0.3;

type T64 = Tensor<f64>;

struct Suite {
    reports: Vec<GradCheckReport>,
    seed: u64,
}

impl Suite {
    fn rng(&mut self) -> ChaCha8Rng {
        self.seed += 1;
        ChaCha8Rng::seed_from_u64(self.seed)
    }

    fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> T64 {
        T64::uniform(shape, lo, hi, &mut self.rng())
    }

    /// Records a check whose closure returns a tensor of any shape.
    fn check<F>(&mut self, name: &str, inputs: Vec<T64>, tol: f64, coords: Option<usize>, f: F) -> Result<()>
    where
        F: Fn(&[T64]) -> Result<T64>,
    {
        let probe_shape = no_grad_shape(&f, &inputs)?;
        let probe = self.uniform(&probe_shape, -1.0, 1.0);
        let seed = self.seed;
        let report = gradcheck_sampled(name, &inputs, tol, coords, seed, |v| f(v)?.mul(&probe).map(|t| t.sum()))?;
        self.reports.push(report);
        Ok(())
    }

    /// Checks a module: the closure sees a registry whose trainable
    /// parameters are replaced by the probe tensors following `extra`.
    ///
    /// Parameters are checked at their initial values plus uniform noise.
    /// At initialization biases are exactly zero, which puts ReLU inputs
    /// on the kink, and attention projections are small enough that their
    /// gradients drown in finite-difference roundoff.
    fn check_module<F>(&mut self, name: &str, reg: &ParamRegistry<f64>, extra: Vec<T64>, tol: f64, f: F) -> Result<()>
    where
        F: Fn(&ParamRegistry<f64>, &[T64]) -> Result<T64>,
    {
        let ids: Vec<_> = reg.iter().filter(|(_, p)| !p.frozen).map(|(id, _)| id).collect();
        let n_extra = extra.len();
        let mut inputs = extra;
        for &id in &ids {
            let p = reg.get(id);
            let noise = self.uniform(p.shape(), -PARAM_JITTER, PARAM_JITTER);
            inputs.push(p.detach().add(&noise)?);
        }
        self.check(name, inputs, tol, Some(SAMPLED_COORDS), |v| {
            let mut r = reg.clone();
            for (k, &id) in ids.iter().enumerate() {
                r.replace(id, v[n_extra + k].clone())?;
            }
            f(&r, &v[..n_extra])
        })
    }
}

fn no_grad_shape<F>(f: &F, inputs: &[T64]) -> Result<Vec<usize>>
where
    F: Fn(&[T64]) -> Result<T64>,
{
    Ok(crate::tensor::no_grad(|| f(inputs))?.shape().to_vec())
}

fn registry(seed: u64) -> (ParamRegistry<f64>, ChaCha8Rng) {
    (ParamRegistry::new(), ChaCha8Rng::seed_from_u64(seed))
}

/// Doubling with a backward rule that claims derivative 3; used to show
/// that the audit catches a wrong rule.
fn faulty_double(x: &T64) -> T64 {
    Tensor::from_op(
        "faulty_double",
        x.shape().to_vec(),
        x.data().iter().map(|v| 2.0 * v).collect(),
        vec![x.clone()],
        Box::new(|args: &BackwardArgs<'_, f64>| vec![Some(args.grad.iter().map(|g| 3.0 * g).collect())]),
    )
}

/// Small model used for the end-to-end check: four scales on a 16×16 input.
pub fn audit_model_config() -> ModelConfig {
    ModelConfig {
        in_channels: 3,
        num_classes: 3,
        backbone: BackboneConfig {
            channels: vec![3, 4, 4, 4],
            strides: vec![2, 2, 2, 2],
        },
        vtm: VtmConfig {
            patch: 8,
            dim: 8,
            depth: 4,
            heads: 2,
            mlp_ratio: 2,
            taps: vec![1, 2, 3, 4],
            grid: 2,
            seed: 5,
        },
        fam: FamMode::MultiScale,
        fmm: FmmConfig {
            blocks: 1,
            heads: 2,
            mlp_ratio: 2,
            shared: true,
        },
        head: HeadConfig {
            decoder_channels: 4,
            aux_channels: 4,
        },
        seed: 11,
    }
}

/// Runs every check. With `inject_fault` an extra check with a deliberately
/// wrong backward rule is appended, which must fail.
pub fn run_suite(inject_fault: bool) -> Result<Vec<GradCheckReport>> {
    let mut s = Suite {
        reports: Vec::new(),
        seed: 0x6a7d,
    };
    elementwise(&mut s)?;
    structural(&mut s)?;
    layers(&mut s)?;
    modules(&mut s)?;
    losses(&mut s)?;
    full_model(&mut s)?;
    if inject_fault {
        let x = s.uniform(&[4], -1.0, 1.0);
        s.check("faulty_double", vec![x], ELEMENTWISE_TOL, None, |v| Ok(faulty_double(&v[0])))?;
    }
    Ok(s.reports)
}

pub fn all_passed(reports: &[GradCheckReport]) -> bool {
    reports.iter().all(|r| r.passed)
}

fn elementwise(s: &mut Suite) -> Result<()> {
    let tol = ELEMENTWISE_TOL;
    let a = s.uniform(&[3, 4], -1.0, 1.0);
    let b = s.uniform(&[3, 4], -1.0, 1.0);
    let row = s.uniform(&[1, 4], -1.0, 1.0);
    let pos = s.uniform(&[3, 4], 0.5, 2.0);
    s.check("add", vec![a.clone(), row.clone()], tol, None, |v| v[0].add(&v[1]))?;
    s.check("sub", vec![a.clone(), b.clone()], tol, None, |v| v[0].sub(&v[1]))?;
    s.check("mul", vec![a.clone(), row.clone()], tol, None, |v| v[0].mul(&v[1]))?;
    s.check("div", vec![a.clone(), pos.clone()], tol, None, |v| v[0].div(&v[1]))?;
    s.check("neg", vec![a.clone()], tol, None, |v| Ok(v[0].neg()))?;
    s.check("scale", vec![a.clone()], tol, None, |v| Ok(v[0].scale(-1.7)))?;
    s.check("add_scalar", vec![a.clone()], tol, None, |v| Ok(v[0].add_scalar(0.3)))?;
    s.check("square", vec![a.clone()], tol, None, |v| Ok(v[0].square()))?;
    s.check("exp", vec![a.clone()], tol, None, |v| Ok(v[0].exp()))?;
    s.check("ln", vec![pos.clone()], tol, None, |v| Ok(v[0].ln()))?;
    s.check("sqrt", vec![pos], tol, None, |v| Ok(v[0].sqrt()))?;
    s.check("relu", vec![a.clone()], tol, None, |v| Ok(v[0].relu()))?;
    s.check("gelu", vec![a], tol, None, |v| Ok(v[0].gelu()))?;
    Ok(())
}

fn structural(s: &mut Suite) -> Result<()> {
    let tol = COMPOSITE_TOL;
    let x = s.uniform(&[2, 3, 4], -1.0, 1.0);
    let y = s.uniform(&[2, 2, 4], -1.0, 1.0);
    s.check("sum", vec![x.clone()], tol, None, |v| Ok(v[0].sum()))?;
    s.check("mean", vec![x.clone()], tol, None, |v| Ok(v[0].mean()))?;
    s.check("sum_axis", vec![x.clone()], tol, None, |v| v[0].sum_axis(1, false))?;
    s.check("mean_axis", vec![x.clone()], tol, None, |v| v[0].mean_axis(2, true))?;
    s.check("reshape", vec![x.clone()], tol, None, |v| v[0].reshape(&[6, 4]))?;
    s.check("permute", vec![x.clone()], tol, None, |v| v[0].permute(&[2, 0, 1]))?;
    s.check("transpose", vec![x.clone()], tol, None, |v| v[0].transpose())?;
    s.check("concat", vec![x.clone(), y], tol, None, |v| Tensor::concat(&[v[0].clone(), v[1].clone()], 1))?;
    s.check("narrow", vec![x.clone()], tol, None, |v| v[0].narrow(1, 1, 2))?;

    let m = s.uniform(&[3, 5], -1.0, 1.0);
    let n = s.uniform(&[5, 2], -1.0, 1.0);
    s.check("matmul", vec![m, n], tol, None, |v| v[0].matmul(&v[1]))?;
    let bm = s.uniform(&[2, 2, 3, 4], -1.0, 1.0);
    let bn = s.uniform(&[2, 2, 4, 3], -1.0, 1.0);
    s.check("matmul_batched", vec![bm, bn], tol, None, |v| v[0].matmul(&v[1]))?;

    let img = s.uniform(&[2, 2, 5, 5], -1.0, 1.0);
    let w3 = s.uniform(&[3, 2, 3, 3], -1.0, 1.0);
    let w2 = s.uniform(&[3, 2, 2, 2], -1.0, 1.0);
    let bias = s.uniform(&[3], -1.0, 1.0);
    s.check("im2col", vec![img.clone()], tol, None, |v| v[0].im2col(3, 2, 1))?;
    s.check("conv2d", vec![img.clone(), w3, bias.clone()], tol, None, |v| {
        v[0].conv2d(&v[1], Some(&v[2]), 1, 1)
    })?;
    let even = s.uniform(&[1, 2, 4, 4], -1.0, 1.0);
    s.check("conv2d_strided", vec![even, w2, bias], tol, None, |v| v[0].conv2d(&v[1], Some(&v[2]), 2, 0))?;
    s.check("bilinear_up", vec![img.clone()], tol, None, |v| v[0].bilinear_resize(8, 7))?;
    s.check("bilinear_down", vec![img], tol, None, |v| v[0].bilinear_resize(2, 3))?;

    let logits = s.uniform(&[2, 4, 3], -2.0, 2.0);
    s.check("softmax", vec![logits.clone()], tol, None, |v| v[0].softmax(1))?;
    s.check("log_softmax", vec![logits.clone()], tol, None, |v| v[0].log_softmax(2))?;
    let target = [0u8, 3, IGNORE_INDEX, 1, 2, 2];
    s.check("cross_entropy", vec![logits], tol, None, |v| Ok(v[0].cross_entropy(&target, IGNORE_INDEX)?.loss))?;
    let tokens = s.uniform(&[2, 3, 6], -1.0, 1.0);
    let gamma = s.uniform(&[6], 0.5, 1.5);
    let beta = s.uniform(&[6], -0.5, 0.5);
    s.check("layer_norm", vec![tokens, gamma, beta], tol, None, |v| {
        v[0].layer_norm(&v[1], &v[2], crate::nn::LAYER_NORM_EPS)
    })?;
    Ok(())
}

fn layers(s: &mut Suite) -> Result<()> {
    let tol = COMPOSITE_TOL;
    let x = s.uniform(&[2, 3, 6], -1.0, 1.0);
    let w = s.uniform(&[6, 4], -1.0, 1.0);
    let b = s.uniform(&[4], -1.0, 1.0);
    s.check("linear_fn", vec![x.clone(), w, b], tol, None, |v| linear(&v[0], &v[1], &v[2]))?;

    let (mut reg, mut rng) = registry(1);
    let mut pb = ParamBuilder::new(&mut reg, &mut rng, "", false);
    let lin = Linear::new(&mut pb.scope("linear"), 6, 5)?;
    let norm = LayerNorm::new(&mut pb.scope("norm"), 6)?;
    let conv = Conv2d::new(&mut pb.scope("conv"), 2, 3, 3, 1, 1)?;
    let img = s.uniform(&[1, 2, 4, 4], -1.0, 1.0);
    s.check_module("Linear", &reg, vec![x.clone()], tol, |r, v| lin.forward(r, &v[0]))?;
    s.check_module("LayerNorm", &reg, vec![x], tol, |r, v| norm.forward(r, &v[0]))?;
    s.check_module("Conv2d", &reg, vec![img], tol, |r, v| conv.forward(r, &v[0]))?;

    let (mut reg, mut rng) = registry(2);
    let mhsa = MultiHeadAttention::new(&mut ParamBuilder::new(&mut reg, &mut rng, "mhsa", false), 8, 2)?;
    let tokens = s.uniform(&[1, 4, 8], -1.0, 1.0);
    s.check_module("MultiHeadAttention", &reg, vec![tokens.clone()], tol, |r, v| mhsa.forward(r, &v[0]))?;

    let (mut reg, mut rng) = registry(3);
    let block = TransformerBlock::new(&mut ParamBuilder::new(&mut reg, &mut rng, "block", false), 8, 2, 2)?;
    s.check_module("TransformerBlock", &reg, vec![tokens], tol, |r, v| block.forward(r, &v[0]))?;
    Ok(())
}

fn pyramid(s: &mut Suite, channels: usize, sizes: &[usize]) -> Vec<T64> {
    sizes.iter().map(|&n| s.uniform(&[1, channels, n, n], -1.0, 1.0)).collect()
}

fn modules(s: &mut Suite) -> Result<()> {
    let tol = COMPOSITE_TOL;
    let maps = pyramid(s, 3, &[4, 2]);

    let (mut reg, mut rng) = registry(4);
    let fam = FeatureAlignment::new(&mut ParamBuilder::new(&mut reg, &mut rng, "fam", false), &[3, 3], 8)?;
    s.check_module("FeatureAlignment", &reg, maps.clone(), tol, |r, v| {
        let out = fam.forward(r, &FeaturePyramid(v.to_vec()), (2, 2))?;
        Tensor::concat(&out.0, 1)
    })?;

    let aligned = pyramid(s, 8, &[2, 2]);
    let (mut reg, mut rng) = registry(5);
    let cfg = FmmConfig {
        blocks: 1,
        heads: 2,
        mlp_ratio: 2,
        shared: true,
    };
    let fmm = FeatureModulation::new(&mut ParamBuilder::new(&mut reg, &mut rng, "fmm", false), &cfg, 8, 2)?;
    s.check_module("FeatureModulation", &reg, aligned.clone(), tol, |r, v| {
        Tensor::concat(&fmm.forward(r, &FeaturePyramid(v.to_vec()))?.0, 1)
    })?;

    let (mut reg, mut rng) = registry(6);
    let decoder = DecoderHead::new(&mut ParamBuilder::new(&mut reg, &mut rng, "decoder", false), &[8, 8], 4, 3)?;
    s.check_module("DecoderHead", &reg, aligned.clone(), tol, |r, v| {
        decoder.forward(r, &FeaturePyramid(v.to_vec()), (8, 8))
    })?;

    let (mut reg, mut rng) = registry(7);
    let aux = AuxHead::new(&mut ParamBuilder::new(&mut reg, &mut rng, "aux", false), 8, 4, 3)?;
    s.check_module("AuxHead", &reg, vec![aligned[0].clone()], tol, |r, v| aux.forward(r, &v[0], (8, 8)))?;
    Ok(())
}

fn losses(s: &mut Suite) -> Result<()> {
    let tol = COMPOSITE_TOL;
    let student = pyramid(s, 4, &[3, 2]);
    let teacher = FeaturePyramid(pyramid(s, 4, &[3, 2]));
    let w = LossWeights::default();
    let pyr = |v: &[T64]| FeaturePyramid(v.to_vec());
    s.check("mse_loss", student.clone(), tol, None, |v| mse_loss(&pyr(v), &teacher))?;
    s.check("mse_sum_loss", student.clone(), tol, None, |v| mse_sum_loss(&pyr(v), &teacher))?;
    s.check("kl_loss", student.clone(), tol, None, |v| kl_loss(&pyr(v), &teacher))?;
    s.check("kt_loss", student.clone(), tol, None, |v| kt_loss(&pyr(v), &teacher, &w))?;

    let y_hat = s.uniform(&[1, 3, 2, 3], -2.0, 2.0);
    let y_aux = s.uniform(&[1, 3, 2, 3], -2.0, 2.0);
    let target = [0u8, 1, 2, IGNORE_INDEX, 1, 0];
    s.check("ce_loss", vec![y_hat.clone()], tol, None, |v| Ok(ce_loss(&v[0], &target, IGNORE_INDEX)?.loss))?;
    s.check("da_loss", vec![y_hat.clone(), y_aux.clone()], tol, None, |v| da_loss(&v[0], &v[1], &target, &w))?;

    let mut inputs = vec![y_hat, y_aux];
    inputs.extend(student);
    s.check("total_loss", inputs, tol, None, |v| {
        let aligned = pyr(&v[2..]);
        let out = SegOutput {
            y_hat: v[0].clone(),
            y_hat_aux: v[1].clone(),
            modulated: aligned.clone(),
            aligned,
            teacher: teacher.clone(),
        };
        Ok(total_loss(&out, &target, &LossConfig::default())?.0)
    })?;
    Ok(())
}

fn full_model(s: &mut Suite) -> Result<()> {
    let model = SegModel::<f64>::new(audit_model_config())?;
    let x = s.uniform(&[1, 3, 16, 16], 0.0, 1.0);
    let mut target: Vec<u8> = (0..256).map(|i| ((i / 16 + i % 16) / 11) as u8).collect();
    target[17] = IGNORE_INDEX;
    let cfg = LossConfig::default();
    s.check_module("SegModel_total_loss", &model.params, Vec::new(), COMPOSITE_TOL, |r, _| {
        let mut m = model.clone();
        m.params = r.clone();
        Ok(total_loss(&m.forward(&x)?, &target, &cfg)?.0)
    })
}
