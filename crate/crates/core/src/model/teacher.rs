//! The frozen vision-transformer teacher.
//!
//! A seeded, randomly initialized ViT stands in for a pretrained encoder.
//! Its parameters are registered frozen and its forward pass always runs
//! without graph recording, so distillation targets are constants.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{map_to_tokens, tokens_to_map, FeaturePyramid, VtmConfig};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, ParamBuilder, ParamId, ParamRegistry, TransformerBlock};
use crate::tensor::{no_grad, Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct Teacher {
    cfg: VtmConfig,
    patch_embed: Linear,
    pos_embed: ParamId,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
}

impl Teacher {
    pub fn new<T: Scalar>(reg: &mut ParamRegistry<T>, in_channels: usize, cfg: &VtmConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut b = ParamBuilder::new(reg, &mut rng, "teacher", true);
        let p = cfg.patch;
        let patch_embed = Linear::new(&mut b.scope("patch_embed"), in_channels * p * p, cfg.dim)?;
        let pos_embed = b.trunc_normal("pos_embed", &[1, cfg.dim, cfg.grid, cfg.grid], 0.02)?;
        let depth = *cfg.taps.last().expect("validated taps");
        let blocks = (0..depth)
            .map(|i| TransformerBlock::new(&mut b.scope(&format!("block{i}")), cfg.dim, cfg.heads, cfg.mlp_ratio))
            .collect::<Result<_>>()?;
        let norm = LayerNorm::new(&mut b.scope("norm"), cfg.dim)?;
        Ok(Self {
            cfg: cfg.clone(),
            patch_embed,
            pos_embed,
            blocks,
            norm,
        })
    }

    pub fn patch(&self) -> usize {
        self.cfg.patch
    }

    /// Token grid for an input of the given size.
    pub fn grid_for(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let p = self.cfg.patch;
        if height % p != 0 || width % p != 0 {
            return Err(Error::invalid(
                "vtm",
                format!("input {height}x{width} is not divisible by patch size {p}"),
            ));
        }
        Ok((height / p, width / p))
    }

    /// Teacher features at the tap layers whose positions are listed in
    /// `taps` (indices into the configured tap list).
    pub fn forward_taps<T: Scalar>(
        &self,
        reg: &ParamRegistry<T>,
        x: &Tensor<T>,
        taps: &[usize],
    ) -> Result<FeaturePyramid<T>> {
        no_grad(|| self.forward_inner(reg, x, taps))
    }

    /// Features at every configured tap.
    pub fn forward<T: Scalar>(&self, reg: &ParamRegistry<T>, x: &Tensor<T>) -> Result<FeaturePyramid<T>> {
        let all: Vec<usize> = (0..self.cfg.taps.len()).collect();
        self.forward_taps(reg, x, &all)
    }

    fn forward_inner<T: Scalar>(&self, reg: &ParamRegistry<T>, x: &Tensor<T>, taps: &[usize]) -> Result<FeaturePyramid<T>> {
        let s = x.shape();
        if s.len() != 4 {
            return Err(Error::invalid("vtm", format!("expected [B,C,H,W], got {s:?}")));
        }
        let (b, c) = (s[0], s[1]);
        let (gh, gw) = self.grid_for(s[2], s[3])?;
        let p = self.cfg.patch;
        let d = self.cfg.dim;
        let patches = x
            .reshape(&[b, c, gh, p, gw, p])?
            .permute(&[0, 2, 4, 1, 3, 5])?
            .reshape(&[b, gh * gw, c * p * p])?;
        let pos = reg.get(self.pos_embed).bilinear_resize(gh, gw)?;
        let mut tokens = self.patch_embed.forward(reg, &patches)?.add(&map_to_tokens(&pos)?)?;

        let wanted: Vec<usize> = taps.iter().map(|&t| self.cfg.taps[t]).collect();
        let last = wanted.iter().copied().max().unwrap_or(0);
        let mut maps = Vec::with_capacity(wanted.len());
        let mut by_layer = std::collections::HashMap::new();
        for (i, block) in self.blocks.iter().take(last).enumerate() {
            tokens = block.forward(reg, &tokens)?;
            if wanted.contains(&(i + 1)) {
                by_layer.insert(i + 1, tokens_to_map(&self.norm.forward(reg, &tokens)?, gh, gw)?);
            }
        }
        for layer in wanted {
            maps.push(by_layer[&layer].clone());
        }
        debug_assert!(maps.iter().all(|m| m.shape() == [b, d, gh, gw]));
        Ok(FeaturePyramid(maps))
    }
}
