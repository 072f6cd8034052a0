use super::{ParamBuilder, ParamId, ParamRegistry};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `y = x W + b` over the last axis, `W: [d_in, d_out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            weight: b.trunc_normal("weight", &[d_in, d_out], 0.02)?,
            bias: Some(b.constant("bias", &[d_out], 0.0)?),
            d_in,
            d_out,
        })
    }

    pub fn without_bias<T: Scalar>(b: &mut ParamBuilder<'_, T>, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            weight: b.trunc_normal("weight", &[d_in, d_out], 0.02)?,
            bias: None,
            d_in,
            d_out,
        })
    }

    pub fn forward<T: Scalar>(&self, reg: &ParamRegistry<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self.bias {
            Some(b) => linear(x, reg.get(self.weight), reg.get(b)),
            None => project(x, reg.get(self.weight)),
        }
    }
}

fn project<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let d_in = w.shape()[0];
    if x.shape().last() != Some(&d_in) {
        return Err(Error::shape("linear", x.shape(), w.shape()));
    }
    let lead = &x.shape()[..x.rank() - 1];
    let mut shape = lead.to_vec();
    shape.push(w.shape()[1]);
    x.reshape(&[lead.iter().product(), d_in])?.matmul(w)?.reshape(&shape)
}

pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let d_in = w.shape()[0];
    if x.shape().last() != Some(&d_in) {
        return Err(Error::shape("linear", x.shape(), w.shape()));
    }
    let lead = &x.shape()[..x.rank() - 1];
    let rows: usize = lead.iter().product();
    let y = x.reshape(&[rows, d_in])?.matmul(w)?.add(b)?;
    let mut shape = lead.to_vec();
    shape.push(w.shape()[1]);
    y.reshape(&shape)
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// He-initialized convolution with zero bias.
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel * kernel;
        Ok(Self {
            weight: b.kaiming("weight", &[out_channels, in_channels, kernel, kernel], fan_in)?,
            bias: b.constant("bias", &[out_channels], 0.0)?,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        })
    }

    pub fn forward<T: Scalar>(&self, reg: &ParamRegistry<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.rank() != 4 || x.shape()[1] != self.in_channels {
            return Err(Error::shape("conv2d", x.shape(), reg.get(self.weight).shape()));
        }
        x.conv2d(reg.get(self.weight), Some(reg.get(self.bias)), self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: b.constant("gamma", &[dim], 1.0)?,
            beta: b.constant("beta", &[dim], 0.0)?,
        })
    }

    pub fn forward<T: Scalar>(&self, reg: &ParamRegistry<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.layer_norm(reg.get(self.gamma), reg.get(self.beta), LAYER_NORM_EPS)
    }
}
