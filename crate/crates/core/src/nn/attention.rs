//! Multi-head self-attention and the pre-norm transformer block.

use super::{LayerNorm, Linear, ParamBuilder, ParamRegistry};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    /// Bias-free: a shift shared by every key cancels in the softmax.
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub dim: usize,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::invalid("mhsa", format!("dim {dim} is not divisible by {heads} heads")));
        }
        Ok(Self {
            query: Linear::new(&mut b.scope("query"), dim, dim)?,
            key: Linear::without_bias(&mut b.scope("key"), dim, dim)?,
            value: Linear::new(&mut b.scope("value"), dim, dim)?,
            output: Linear::new(&mut b.scope("output"), dim, dim)?,
            dim,
            heads,
        })
    }

    /// `[B,T,d] -> [B,h,T,d/h]`
    fn split_heads<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, t) = (x.shape()[0], x.shape()[1]);
        x.reshape(&[b, t, self.heads, self.dim / self.heads])?
            .permute(&[0, 2, 1, 3])
    }

    /// Returns the output `[B,T,d]` and attention weights `[B,h,T,T]`.
    pub fn forward_with_weights<T: Scalar>(
        &self,
        reg: &ParamRegistry<T>,
        x: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let s = x.shape();
        if s.len() != 3 || s[2] != self.dim {
            return Err(Error::invalid("mhsa", format!("expected [B,T,{}], got {s:?}", self.dim)));
        }
        let (b, t) = (s[0], s[1]);
        let head_dim = self.dim / self.heads;
        let q = self.split_heads(&self.query.forward(reg, x)?)?;
        let k = self.split_heads(&self.key.forward(reg, x)?)?;
        let v = self.split_heads(&self.value.forward(reg, x)?)?;
        let scale = T::one() / T::from_usize(head_dim).unwrap().sqrt();
        let weights = q.matmul(&k.transpose()?)?.scale(scale).softmax(3)?;
        let mixed = weights
            .matmul(&v)?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, t, self.dim])?;
        Ok((self.output.forward(reg, &mixed)?, weights))
    }

    pub fn forward<T: Scalar>(&self, reg: &ParamRegistry<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_with_weights(reg, x)?.0)
    }
}

/// `x + MHSA(LN(x))`, then `+ MLP(LN(.))` with a GELU MLP of width
/// `mlp_ratio * d`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attention: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerBlock {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&mut b.scope("norm1"), dim)?,
            attention: MultiHeadAttention::new(&mut b.scope("attn"), dim, heads)?,
            norm2: LayerNorm::new(&mut b.scope("norm2"), dim)?,
            fc1: Linear::new(&mut b.scope("fc1"), dim, mlp_ratio * dim)?,
            fc2: Linear::new(&mut b.scope("fc2"), mlp_ratio * dim, dim)?,
        })
    }

    pub fn forward<T: Scalar>(&self, reg: &ParamRegistry<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = x.add(&self.attention.forward(reg, &self.norm1.forward(reg, x)?)?)?;
        let mlp = self
            .fc2
            .forward(reg, &self.fc1.forward(reg, &self.norm2.forward(reg, &h)?)?.gelu())?;
        h.add(&mlp)
    }

    /// Zeroes the attention and MLP output projections, making the block an
    /// exact identity.
    pub fn zero_output_projections<T: Scalar>(&self, reg: &mut ParamRegistry<T>) -> Result<()> {
        for id in [
            Some(self.attention.output.weight),
            self.attention.output.bias,
            Some(self.fc2.weight),
            self.fc2.bias,
        ]
        .into_iter()
        .flatten()
        {
            let n = reg.get(id).numel();
            reg.set_data(id, vec![T::zero(); n])?;
        }
        Ok(())
    }
}
