use super::FeaturePyramid;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamBuilder, ParamRegistry};
use crate::tensor::{Scalar, Tensor};

/// Fuse-and-classify decoder: a 3×3 conv per scale, resize to the first
/// scale, concatenate, 1×1 fusion to class logits, resize to the input.
#[derive(Debug, Clone)]
pub struct DecoderHead {
    lateral: Vec<Conv2d>,
    fuse: Conv2d,
}

impl DecoderHead {
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        in_channels: &[usize],
        channels: usize,
        num_classes: usize,
    ) -> Result<Self> {
        let lateral = in_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv2d::new(&mut b.scope(&format!("lateral{i}")), c, channels, 3, 1, 1))
            .collect::<Result<_>>()?;
        let fuse = Conv2d::new(&mut b.scope("fuse"), channels * in_channels.len(), num_classes, 1, 1, 0)?;
        Ok(Self { lateral, fuse })
    }

    pub fn forward<T: Scalar>(
        &self,
        reg: &ParamRegistry<T>,
        pyramid: &FeaturePyramid<T>,
        out_size: (usize, usize),
    ) -> Result<Tensor<T>> {
        if pyramid.is_empty() || pyramid.len() != self.lateral.len() {
            return Err(Error::invalid(
                "decoder",
                format!("{} feature maps for {} lateral convs", pyramid.len(), self.lateral.len()),
            ));
        }
        let first = pyramid[0].shape();
        let (h, w) = (first[2], first[3]);
        let parts = pyramid
            .iter()
            .zip(&self.lateral)
            .map(|(f, conv)| conv.forward(reg, f)?.relu().bilinear_resize(h, w))
            .collect::<Result<Vec<_>>>()?;
        let fused = if parts.len() == 1 { parts[0].clone() } else { Tensor::concat(&parts, 1)? };
        self.fuse.forward(reg, &fused)?.bilinear_resize(out_size.0, out_size.1)
    }
}

/// Auxiliary head over a single feature map: conv 3×3, ReLU, conv 1×1 to
/// class logits, resize to the input.
#[derive(Debug, Clone)]
pub struct AuxHead {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl AuxHead {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, in_channels: usize, channels: usize, num_classes: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(&mut b.scope("conv1"), in_channels, channels, 3, 1, 1)?,
            conv2: Conv2d::new(&mut b.scope("conv2"), channels, num_classes, 1, 1, 0)?,
        })
    }

    pub fn forward<T: Scalar>(&self, reg: &ParamRegistry<T>, x: &Tensor<T>, out_size: (usize, usize)) -> Result<Tensor<T>> {
        let h = self.conv1.forward(reg, x)?.relu();
        self.conv2.forward(reg, &h)?.bilinear_resize(out_size.0, out_size.1)
    }
}
