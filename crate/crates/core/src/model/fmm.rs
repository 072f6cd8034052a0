use super::{map_to_tokens, tokens_to_map, FeaturePyramid, FmmConfig};
use crate::error::Result;
use crate::nn::{ParamBuilder, ParamRegistry, TransformerBlock};
use crate::tensor::Scalar;

/// A stack of transformer blocks run over each aligned scale as a token
/// sequence. With zero blocks the module returns its input untouched.
#[derive(Debug, Clone)]
pub struct FeatureModulation {
    /// One stack when shared, otherwise one per scale.
    stacks: Vec<Vec<TransformerBlock>>,
}

impl FeatureModulation {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, cfg: &FmmConfig, dim: usize, scales: usize) -> Result<Self> {
        let stack_count = if cfg.shared || cfg.blocks == 0 { 1 } else { scales };
        let mut stacks = Vec::with_capacity(stack_count);
        for s in 0..stack_count {
            let mut sb = if cfg.shared { b.scope("shared") } else { b.scope(&format!("scale{s}")) };
            let stack = (0..cfg.blocks)
                .map(|j| TransformerBlock::new(&mut sb.scope(&format!("block{j}")), dim, cfg.heads, cfg.mlp_ratio))
                .collect::<Result<_>>()?;
            stacks.push(stack);
        }
        Ok(Self { stacks })
    }

    pub fn blocks(&self) -> impl Iterator<Item = &TransformerBlock> {
        self.stacks.iter().flatten()
    }

    pub fn forward<T: Scalar>(&self, reg: &ParamRegistry<T>, aligned: &FeaturePyramid<T>) -> Result<FeaturePyramid<T>> {
        if self.stacks.iter().all(Vec::is_empty) {
            return Ok(aligned.clone());
        }
        let mut out = Vec::with_capacity(aligned.len());
        for (i, f) in aligned.iter().enumerate() {
            let stack = &self.stacks[i.min(self.stacks.len() - 1)];
            let (h, w) = (f.shape()[2], f.shape()[3]);
            let mut tokens = map_to_tokens(f)?;
            for block in stack {
                tokens = block.forward(reg, &tokens)?;
            }
            out.push(tokens_to_map(&tokens, h, w)?);
        }
        Ok(FeaturePyramid(out))
    }
}
