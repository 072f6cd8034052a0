//! The segmentation network: CNN student, frozen transformer teacher,
//! feature alignment (FAM), feature modulation (FMM) and two decoder heads.
//!
//! All parameters live in one [`ParamRegistry`] owned by [`SegModel`].
//! Teacher parameters are registered frozen under the `teacher.` prefix.

mod backbone;
pub mod checkpoint;
mod config;
mod fam;
mod fmm;
mod heads;
mod teacher;

use std::ops::Deref;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use backbone::Backbone;
pub use checkpoint::{Checkpoint, Payload, Record};
pub use config::{even_taps, BackboneConfig, FamMode, FmmConfig, HeadConfig, ModelConfig, VtmConfig};
pub use fam::FeatureAlignment;
pub use fmm::FeatureModulation;
pub use heads::{AuxHead, DecoderHead};
pub use teacher::Teacher;

use crate::error::{Error, Result};
use crate::nn::{ParamBuilder, ParamId, ParamRegistry};
use crate::tensor::{no_grad, Scalar, Tensor};

/// Ordered per-scale feature maps, finest first.
#[derive(Debug, Clone, Default)]
pub struct FeaturePyramid<T: Scalar>(pub Vec<Tensor<T>>);

impl<T: Scalar> Deref for FeaturePyramid<T> {
    type Target = [Tensor<T>];

    fn deref(&self) -> &[Tensor<T>] {
        &self.0
    }
}

impl<T: Scalar> FeaturePyramid<T> {
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.0.iter().map(|t| t.shape().to_vec()).collect()
    }

    pub fn detach(&self) -> Self {
        Self(self.0.iter().map(Tensor::detach).collect())
    }
}

/// `[B,C,H,W] -> [B,H*W,C]`
pub(crate) fn map_to_tokens<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    x.permute(&[0, 2, 3, 1])?.reshape(&[s[0], s[2] * s[3], s[1]])
}

/// `[B,H*W,C] -> [B,C,H,W]`
pub(crate) fn tokens_to_map<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    x.reshape(&[s[0], h, w, s[2]])?.permute(&[0, 3, 1, 2])
}

/// Everything one forward pass produces.
#[derive(Debug, Clone)]
pub struct SegOutput<T: Scalar> {
    /// Primary logits `[B,K,H,W]`.
    pub y_hat: Tensor<T>,
    /// Auxiliary logits `[B,K,H,W]`.
    pub y_hat_aux: Tensor<T>,
    /// Student features after alignment (the raw backbone pyramid when FAM
    /// is disabled).
    pub aligned: FeaturePyramid<T>,
    /// Aligned features after the FMM blocks.
    pub modulated: FeaturePyramid<T>,
    /// Teacher targets paired with `aligned`; empty when FAM is disabled.
    pub teacher: FeaturePyramid<T>,
}

#[derive(Debug, Clone)]
struct Alignment {
    teacher: Teacher,
    fam: FeatureAlignment,
    fmm: FeatureModulation,
}

#[derive(Debug, Clone)]
pub struct SegModel<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamRegistry<T>,
    backbone: Backbone,
    alignment: Option<Alignment>,
    decoder: DecoderHead,
    aux: AuxHead,
}

impl<T: Scalar> SegModel<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamRegistry::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let channels = &config.backbone.channels;
        let d = config.vtm.dim;
        let k = config.num_classes;

        let (backbone, fam_fmm, decoder, aux) = {
            let mut b = ParamBuilder::new(&mut params, &mut rng, "", false);
            let backbone = Backbone::new(&mut b.scope("backbone"), config.in_channels, &config.backbone)?;
            let fam_inputs: &[usize] = match config.fam {
                FamMode::MultiScale => channels,
                FamMode::SingleScale => &channels[channels.len() - 1..],
                FamMode::Disabled => &[],
            };
            let fam_fmm = if fam_inputs.is_empty() {
                None
            } else {
                let fam = FeatureAlignment::new(&mut b.scope("fam"), fam_inputs, d)?;
                let fmm = FeatureModulation::new(&mut b.scope("fmm"), &config.fmm, d, fam_inputs.len())?;
                Some((fam, fmm))
            };
            let head_inputs = if fam_fmm.is_some() { vec![d; fam_inputs.len()] } else { channels.clone() };
            let decoder = DecoderHead::new(&mut b.scope("decoder"), &head_inputs, config.head.decoder_channels, k)?;
            let aux = AuxHead::new(&mut b.scope("aux"), *head_inputs.last().unwrap(), config.head.aux_channels, k)?;
            (backbone, fam_fmm, decoder, aux)
        };
        let alignment = match fam_fmm {
            Some((fam, fmm)) => Some(Alignment {
                teacher: Teacher::new(&mut params, config.in_channels, &config.vtm)?,
                fam,
                fmm,
            }),
            None => None,
        };
        Ok(Self {
            config,
            params,
            backbone,
            alignment,
            decoder,
            aux,
        })
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn teacher(&self) -> Option<&Teacher> {
        self.alignment.as_ref().map(|a| &a.teacher)
    }

    pub fn fam(&self) -> Option<&FeatureAlignment> {
        self.alignment.as_ref().map(|a| &a.fam)
    }

    pub fn fmm(&self) -> Option<&FeatureModulation> {
        self.alignment.as_ref().map(|a| &a.fmm)
    }

    pub fn decoder(&self) -> &DecoderHead {
        &self.decoder
    }

    pub fn aux_head(&self) -> &AuxHead {
        &self.aux
    }

    pub fn teacher_param_ids(&self) -> Vec<ParamId> {
        self.params.iter().filter(|(_, p)| p.frozen).map(|(id, _)| id).collect()
    }

    pub fn student_param_ids(&self) -> Vec<ParamId> {
        self.params.iter().filter(|(_, p)| !p.frozen).map(|(id, _)| id).collect()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<SegOutput<T>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.config.in_channels {
            return Err(Error::invalid(
                "model",
                format!("expected [B,{},H,W], got {s:?}", self.config.in_channels),
            ));
        }
        let (h, w) = (s[2], s[3]);
        self.config.check_input(h, w)?;
        let reg = &self.params;
        let pyramid = self.backbone.forward(reg, x)?;
        let (aligned, modulated, teacher) = match &self.alignment {
            None => (pyramid.clone(), pyramid, FeaturePyramid::default()),
            Some(a) => {
                let grid = a.teacher.grid_for(h, w)?;
                let (student, taps) = match self.config.fam {
                    FamMode::SingleScale => (
                        FeaturePyramid(vec![pyramid[pyramid.len() - 1].clone()]),
                        vec![self.config.vtm.taps.len() - 1],
                    ),
                    _ => (pyramid, (0..self.config.vtm.taps.len()).collect()),
                };
                let teacher = a.teacher.forward_taps(reg, x, &taps)?;
                let aligned = a.fam.forward(reg, &student, grid)?;
                let modulated = a.fmm.forward(reg, &aligned)?;
                (aligned, modulated, teacher)
            }
        };
        let y_hat = self.decoder.forward(reg, &modulated, (h, w))?;
        let y_hat_aux = self.aux.forward(reg, &aligned[aligned.len() - 1], (h, w))?;
        Ok(SegOutput {
            y_hat,
            y_hat_aux,
            aligned,
            modulated,
            teacher,
        })
    }

    /// Per-pixel argmax of the primary logits, `[B*H*W]` row-major.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<u8>> {
        let logits = no_grad(|| self.forward(x))?.y_hat;
        Ok(argmax_channels(&logits))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::default();
        for (_, p) in self.params.iter() {
            c.push(Record {
                name: p.name.clone(),
                dims: p.tensor.shape().to_vec(),
                payload: Payload::from_scalars(p.tensor.data()),
            });
        }
        c
    }

    /// Loads every parameter from `ckpt`. Extra records (such as optimizer
    /// state) are ignored; missing or misshapen parameters are errors.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let ids: Vec<ParamId> = self.params.ids().collect();
        for id in ids {
            let p = self.params.param(id);
            let name = p.name.clone();
            let rec = ckpt.get(&name).ok_or_else(|| Error::CheckpointMismatch {
                name: name.clone(),
                msg: "missing from checkpoint".into(),
            })?;
            if rec.dims != p.tensor.shape() {
                return Err(Error::CheckpointMismatch {
                    name,
                    msg: format!("shape {:?} in checkpoint, {:?} in model", rec.dims, p.tensor.shape()),
                });
            }
            let data = rec.payload.to_scalars::<T>().ok_or_else(|| Error::CheckpointMismatch {
                name: name.clone(),
                msg: "integer payload for a float parameter".into(),
            })?;
            self.params.set_data(id, data)?;
        }
        Ok(())
    }
}

/// Argmax over axis 1 of a `[B,K,H,W]` tensor.
pub fn argmax_channels<T: Scalar>(logits: &Tensor<T>) -> Vec<u8> {
    let s = logits.shape();
    let (b, k, hw) = (s[0], s[1], s[2] * s[3]);
    let d = logits.data();
    let mut out = Vec::with_capacity(b * hw);
    for bi in 0..b {
        let base = bi * k * hw;
        for p in 0..hw {
            let mut best = 0;
            for c in 1..k {
                if d[base + c * hw + p] > d[base + best * hw + p] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                channels: vec![4, 8],
                strides: vec![2, 2],
            },
            vtm: VtmConfig {
                patch: 4,
                dim: 8,
                depth: 2,
                heads: 2,
                taps: vec![1, 2],
                grid: 4,
                ..VtmConfig::default()
            },
            fmm: FmmConfig {
                blocks: 1,
                heads: 2,
                ..FmmConfig::default()
            },
            head: HeadConfig {
                decoder_channels: 4,
                aux_channels: 4,
            },
            ..ModelConfig::default()
        }
    }

    #[test]
    fn default_backbone_shapes() {
        let m = SegModel::<f32>::new(ModelConfig::default()).unwrap();
        let x = Tensor::uniform(&[1, 3, 64, 64], 0.0, 1.0, &mut rand::rng());
        let p = m.backbone().forward(&m.params, &x).unwrap();
        assert_eq!(
            p.shapes(),
            vec![vec![1, 16, 32, 32], vec![1, 32, 16, 16], vec![1, 64, 8, 8], vec![1, 128, 4, 4]]
        );
    }

    #[test]
    fn seg_output_contract() {
        let m = SegModel::<f32>::new(ModelConfig::default()).unwrap();
        let x = Tensor::uniform(&[2, 3, 64, 64], 0.0, 1.0, &mut rand::rng());
        let out = m.forward(&x).unwrap();
        assert_eq!(out.y_hat.shape(), &[2, 5, 64, 64]);
        assert_eq!(out.y_hat_aux.shape(), &[2, 5, 64, 64]);
        assert_eq!(out.aligned.len(), 4);
        for i in 0..4 {
            assert_eq!(out.aligned[i].shape(), &[2, 64, 8, 8]);
            assert_eq!(out.modulated[i].shape(), out.aligned[i].shape());
            assert_eq!(out.teacher[i].shape(), out.aligned[i].shape());
            assert!(!out.teacher[i].requires_grad());
        }
    }

    #[test]
    fn indivisible_input_rejected() {
        let m = SegModel::<f32>::new(tiny()).unwrap();
        let x = Tensor::zeros(&[1, 3, 10, 8]);
        assert!(m.forward(&x).is_err());
    }

    #[test]
    fn single_scale_and_disabled_modes() {
        let x = Tensor::<f64>::uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut rand::rng());
        let mut cfg = tiny();
        cfg.fam = FamMode::SingleScale;
        let out = SegModel::<f64>::new(cfg.clone()).unwrap().forward(&x).unwrap();
        assert_eq!(out.aligned.len(), 1);
        assert_eq!(out.teacher.len(), 1);
        assert_eq!(out.aligned[0].shape(), out.teacher[0].shape());
        assert_eq!(out.y_hat.shape(), &[1, 5, 16, 16]);

        cfg.fam = FamMode::Disabled;
        let m = SegModel::<f64>::new(cfg).unwrap();
        assert!(m.teacher().is_none());
        assert!(m.teacher_param_ids().is_empty());
        let out = m.forward(&x).unwrap();
        assert!(out.teacher.is_empty());
        assert_eq!(out.y_hat_aux.shape(), &[1, 5, 16, 16]);
    }

    #[test]
    fn fmm_without_blocks_is_identity() {
        let mut cfg = tiny();
        cfg.fmm.blocks = 0;
        let m = SegModel::<f64>::new(cfg).unwrap();
        let x = Tensor::uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut rand::rng());
        let out = m.forward(&x).unwrap();
        for (a, b) in out.aligned.iter().zip(out.modulated.iter()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn aux_head_has_two_convs() {
        let m = SegModel::<f32>::new(tiny()).unwrap();
        let names: Vec<_> = m
            .params
            .iter()
            .filter(|(_, p)| p.name.starts_with("aux.") && p.name.ends_with(".weight"))
            .map(|(_, p)| p.name.clone())
            .collect();
        assert_eq!(names, vec!["aux.conv1.weight", "aux.conv2.weight"]);
    }

    #[test]
    fn forward_is_deterministic() {
        let x = Tensor::<f32>::uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut rand::rng());
        let a = SegModel::<f32>::new(tiny()).unwrap().forward(&x).unwrap();
        let b = SegModel::<f32>::new(tiny()).unwrap().forward(&x).unwrap();
        assert_eq!(a.y_hat.data(), b.y_hat.data());
        assert_eq!(a.teacher[1].data(), b.teacher[1].data());
    }

    #[test]
    fn teacher_ignores_student_seed() {
        let mut other = tiny();
        other.seed = 999;
        let a = SegModel::<f32>::new(tiny()).unwrap();
        let b = SegModel::<f32>::new(other).unwrap();
        for id in a.teacher_param_ids() {
            let name = &a.params.param(id).name;
            assert_eq!(a.params.get(id).data(), b.params.get(b.params.find(name).unwrap()).data());
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let a = SegModel::<f32>::new(tiny()).unwrap();
        let mut other = tiny();
        other.seed = 7;
        let mut b = SegModel::<f32>::new(other).unwrap();
        b.load_checkpoint(&a.to_checkpoint()).unwrap();
        assert_eq!(a.to_checkpoint().encode(), b.to_checkpoint().encode());

        let mut wrong = tiny();
        wrong.head.decoder_channels = 6;
        let mut c = SegModel::<f32>::new(wrong).unwrap();
        assert!(matches!(c.load_checkpoint(&a.to_checkpoint()), Err(Error::CheckpointMismatch { .. })));
    }

    #[test]
    fn identity_alignment_passes_through() {
        let mut cfg = tiny();
        cfg.backbone.channels = vec![8];
        cfg.backbone.strides = vec![4];
        cfg.vtm.taps = vec![2];
        let mut m = SegModel::<f64>::new(cfg).unwrap();
        let proj = m.fam().unwrap().projections()[0].clone();
        let mut eye = vec![0.0; 64];
        (0..8).for_each(|i| eye[i * 9] = 1.0);
        m.params.set_data(proj.weight, eye).unwrap();
        let x = Tensor::<f64>::uniform(&[1, 8, 4, 4], -1.0, 1.0, &mut rand::rng());
        let fam = m.fam().unwrap();
        let out = fam.forward(&m.params, &FeaturePyramid(vec![x.clone()]), (4, 4)).unwrap();
        assert_eq!(out[0].data(), x.data());
    }
}
