use super::{BackboneConfig, FeaturePyramid};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamBuilder, ParamRegistry};
use crate::tensor::{Scalar, Tensor};

/// One downsampling stage: a patchifying stem (kernel = stride) followed by
/// two padded 3×3 convolutions, each with ReLU.
#[derive(Debug, Clone)]
struct Stage {
    stem: Conv2d,
    conv1: Conv2d,
    conv2: Conv2d,
}

impl Stage {
    fn forward<T: Scalar>(&self, reg: &ParamRegistry<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.stem.forward(reg, x)?.relu();
        let h = self.conv1.forward(reg, &h)?.relu();
        Ok(self.conv2.forward(reg, &h)?.relu())
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    stages: Vec<Stage>,
    total_stride: usize,
}

impl Backbone {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, in_channels: usize, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::with_capacity(cfg.scales());
        let mut c_in = in_channels;
        for (i, (&c, &s)) in cfg.channels.iter().zip(&cfg.strides).enumerate() {
            let mut sb = b.scope(&format!("stage{i}"));
            stages.push(Stage {
                stem: Conv2d::new(&mut sb.scope("stem"), c_in, c, s, s, 0)?,
                conv1: Conv2d::new(&mut sb.scope("conv1"), c, c, 3, 1, 1)?,
                conv2: Conv2d::new(&mut sb.scope("conv2"), c, c, 3, 1, 1)?,
            });
            c_in = c;
        }
        Ok(Self {
            stages,
            total_stride: cfg.total_stride(),
        })
    }

    pub fn forward<T: Scalar>(&self, reg: &ParamRegistry<T>, x: &Tensor<T>) -> Result<FeaturePyramid<T>> {
        let (h, w) = (x.shape()[2], x.shape()[3]);
        if h % self.total_stride != 0 || w % self.total_stride != 0 {
            return Err(Error::invalid(
                "backbone",
                format!("input {h}x{w} is not divisible by total stride {}", self.total_stride),
            ));
        }
        let mut maps = Vec::with_capacity(self.stages.len());
        let mut cur = x.clone();
        for stage in &self.stages {
            cur = stage.forward(reg, &cur)?;
            maps.push(cur.clone());
        }
        Ok(FeaturePyramid(maps))
    }
}
