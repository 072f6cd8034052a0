use super::FeaturePyramid;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamBuilder, ParamRegistry};
use crate::tensor::{Scalar, Tensor};

/// Projects each student scale to the teacher's channel width with a 1×1
/// convolution, then resizes it onto the teacher's token grid.
#[derive(Debug, Clone)]
pub struct FeatureAlignment {
    projections: Vec<Conv2d>,
}

impl FeatureAlignment {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, in_channels: &[usize], out_channels: usize) -> Result<Self> {
        let projections = in_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv2d::new(&mut b.scope(&format!("proj{i}")), c, out_channels, 1, 1, 0))
            .collect::<Result<_>>()?;
        Ok(Self { projections })
    }

    pub fn projections(&self) -> &[Conv2d] {
        &self.projections
    }

    pub fn forward<T: Scalar>(
        &self,
        reg: &ParamRegistry<T>,
        pyramid: &FeaturePyramid<T>,
        grid: (usize, usize),
    ) -> Result<FeaturePyramid<T>> {
        if pyramid.len() != self.projections.len() {
            return Err(Error::invalid(
                "fam",
                format!("{} feature maps for {} projections", pyramid.len(), self.projections.len()),
            ));
        }
        pyramid
            .iter()
            .zip(&self.projections)
            .map(|(f, proj)| {
                if f.rank() != 4 || f.shape()[1] != proj.in_channels {
                    return Err(Error::invalid(
                        "fam",
                        format!("expected {} channels, got shape {:?}", proj.in_channels, f.shape()),
                    ));
                }
                proj.forward(reg, f)?.bilinear_resize(grid.0, grid.1)
            })
            .collect::<Result<Vec<Tensor<T>>>>()
            .map(FeaturePyramid)
    }
}
