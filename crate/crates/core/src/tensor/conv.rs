//! 2-D convolution as `im2col` followed by a shared-weight matmul.

use super::{BackwardArgs, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

/// Output extent of a convolution, or `None` when the window does not tile
/// the padded input exactly.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let span = (input + 2 * pad).checked_sub(kernel)?;
    (stride > 0 && span % stride == 0).then_some(span / stride + 1)
}

fn im2col_fwd<T: Scalar>(x: &[T], batch: usize, g: &Geometry) -> Vec<T> {
    let k = g.kernel;
    let rows = g.channels * k * k;
    let cols = g.out_h * g.out_w;
    let mut out = vec![T::zero(); batch * rows * cols];
    for b in 0..batch {
        for c in 0..g.channels {
            let plane = &x[(b * g.channels + c) * g.height * g.width..][..g.height * g.width];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut out[(b * rows + row) * cols..][..cols];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * g.width..][..g.width];
                        for ox in 0..g.out_w {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.width as isize {
                                dst[oy * g.out_w + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im<T: Scalar>(cols_grad: &[T], batch: usize, g: &Geometry) -> Vec<T> {
    let k = g.kernel;
    let rows = g.channels * k * k;
    let cols = g.out_h * g.out_w;
    let mut out = vec![T::zero(); batch * g.channels * g.height * g.width];
    for b in 0..batch {
        for c in 0..g.channels {
            let plane = &mut out[(b * g.channels + c) * g.height * g.width..][..g.height * g.width];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols_grad[(b * rows + row) * cols..][..cols];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * g.width..][..g.width];
                        for ox in 0..g.out_w {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.width as isize {
                                dst[ix as usize] += src[oy * g.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

impl<T: Scalar> Tensor<T> {
    /// Unrolls `[B,C,H,W]` into `[B, C*k*k, H'*W']` patch columns.
    pub fn im2col(&self, kernel: usize, stride: usize, pad: usize) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::invalid("im2col", format!("expected [B,C,H,W], got {s:?}")));
        }
        let (batch, channels, height, width) = (s[0], s[1], s[2], s[3]);
        let out_h = conv_output_size(height, kernel, stride, pad);
        let out_w = conv_output_size(width, kernel, stride, pad);
        let (Some(out_h), Some(out_w)) = (out_h, out_w) else {
            return Err(Error::invalid(
                "conv2d",
                format!(
                    "non-integral output size for input {height}x{width}, kernel {kernel}, stride {stride}, pad {pad}"
                ),
            ));
        };
        let g = Geometry {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h,
            out_w,
        };
        let data = im2col_fwd(self.data(), batch, &g);
        Ok(Tensor::from_op(
            "im2col",
            vec![batch, channels * kernel * kernel, out_h * out_w],
            data,
            vec![self.clone()],
            Box::new(move |args: &BackwardArgs<'_, T>| vec![Some(col2im(args.grad, batch, &g))]),
        ))
    }

    /// Cross-correlation of `[B,C,H,W]` with weights `[O,C,k,k]` and an
    /// optional bias `[O]`.
    pub fn conv2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<T>> {
        let (xs, ws) = (self.shape(), weight.shape());
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] {
            return Err(Error::shape("conv2d", xs, ws));
        }
        let (batch, channels, height, width) = (xs[0], xs[1], xs[2], xs[3]);
        let (out_ch, kernel) = (ws[0], ws[2]);
        let cols = if kernel == 1 && stride == 1 && pad == 0 {
            self.reshape(&[batch, channels, height * width])?
        } else {
            self.im2col(kernel, stride, pad)?
        };
        let out_h = conv_output_size(height, kernel, stride, pad).unwrap();
        let out_w = conv_output_size(width, kernel, stride, pad).unwrap();
        let w2 = weight.reshape(&[out_ch, channels * kernel * kernel])?;
        let y = w2.matmul(&cols)?.reshape(&[batch, out_ch, out_h, out_w])?;
        match bias {
            Some(b) => {
                if b.shape() != [out_ch] {
                    return Err(Error::shape("conv2d bias", b.shape(), &[out_ch]));
                }
                y.add(&b.reshape(&[1, out_ch, 1, 1])?)
            }
            None => Ok(y),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pointwise_identity_kernel() {
        let x = Tensor::<f64>::uniform(&[2, 3, 4, 5], -1.0, 1.0, &mut rand::rng());
        let mut w = vec![0.0; 9];
        for c in 0..3 {
            w[c * 3 + c] = 1.0;
        }
        let w = Tensor::from_f64(&[3, 3, 1, 1], &w).unwrap();
        let b = Tensor::zeros(&[3]);
        let y = x.conv2d(&w, Some(&b), 1, 0).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn ones_kernel_center_sum() {
        let x = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let w = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let y = x.conv2d(&w, None, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.data()[4], 9.0);
        assert_eq!(y.data()[0], 4.0);
    }

    #[test]
    fn strided_output_geometry() {
        let x = Tensor::<f64>::zeros(&[1, 2, 8, 8]);
        let w = Tensor::<f64>::zeros(&[4, 2, 2, 2]);
        assert_eq!(x.conv2d(&w, None, 2, 0).unwrap().shape(), &[1, 4, 4, 4]);
    }

    #[test]
    fn non_integral_output_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 1, 8, 8]);
        let w = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        let err = x.conv2d(&w, None, 2, 1).unwrap_err();
        assert!(err.to_string().contains("non-integral"), "{err}");
    }

    #[test]
    fn matches_direct_loops() {
        let mut rng = rand::rng();
        let x = Tensor::<f64>::uniform(&[2, 3, 5, 6], -1.0, 1.0, &mut rng);
        let w = Tensor::<f64>::uniform(&[4, 3, 3, 3], -1.0, 1.0, &mut rng);
        let y = x.conv2d(&w, None, 1, 1).unwrap();
        let (xd, wd) = (x.data(), w.data());
        for b in 0..2 {
            for o in 0..4 {
                for i in 0..5 {
                    for j in 0..6 {
                        let mut acc = 0.0;
                        for c in 0..3 {
                            for ki in 0..3 {
                                for kj in 0..3 {
                                    let (yy, xx) = (i as isize + ki as isize - 1, j as isize + kj as isize - 1);
                                    if (0..5).contains(&yy) && (0..6).contains(&xx) {
                                        acc += xd[((b * 3 + c) * 5 + yy as usize) * 6 + xx as usize]
                                            * wd[((o * 3 + c) * 3 + ki) * 3 + kj];
                                    }
                                }
                            }
                        }
                        let got = y.data()[((b * 4 + o) * 5 + i) * 6 + j];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
