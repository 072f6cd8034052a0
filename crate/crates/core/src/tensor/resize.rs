//! Bilinear resize with half-pixel centers (`align_corners = false`).
//!
//! Output index `i` samples source coordinate `(i + 0.5) * in / out - 0.5`,
//! clamped to `[0, in - 1]`.

use super::{BackwardArgs, Scalar, Tensor};
use crate::error::{Error, Result};

/// Per-output-index `(lo, hi, weight_of_hi)` along one axis.
fn axis_taps<T: Scalar>(input: usize, output: usize) -> Vec<(usize, usize, T)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, T::c(src - lo as f64))
        })
        .collect()
}

impl<T: Scalar> Tensor<T> {
    /// Resizes `[B,C,H,W]` to `[B,C,out_h,out_w]`. Equal sizes pass through
    /// unchanged.
    pub fn bilinear_resize(&self, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::invalid("bilinear_resize", format!("expected [B,C,H,W], got {s:?}")));
        }
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid("bilinear_resize", format!("zero target size {out_h}x{out_w}")));
        }
        let (planes, in_h, in_w) = (s[0] * s[1], s[2], s[3]);
        if in_h == 0 || in_w == 0 {
            return Err(Error::invalid("bilinear_resize", "empty input"));
        }
        if (in_h, in_w) == (out_h, out_w) {
            return Ok(Tensor::from_op(
                "bilinear_resize",
                s.to_vec(),
                self.to_vec(),
                vec![self.clone()],
                Box::new(|args: &BackwardArgs<'_, T>| vec![Some(args.grad.to_vec())]),
            ));
        }
        let ys = axis_taps::<T>(in_h, out_h);
        let xs = axis_taps::<T>(in_w, out_w);
        let x = self.data();
        let mut out = Vec::with_capacity(planes * out_h * out_w);
        for p in 0..planes {
            let plane = &x[p * in_h * in_w..(p + 1) * in_h * in_w];
            for &(y0, y1, ly) in &ys {
                let (r0, r1) = (&plane[y0 * in_w..], &plane[y1 * in_w..]);
                for &(x0, x1, lx) in &xs {
                    let top = r0[x0] * (T::one() - lx) + r0[x1] * lx;
                    let bottom = r1[x0] * (T::one() - lx) + r1[x1] * lx;
                    out.push(top * (T::one() - ly) + bottom * ly);
                }
            }
        }
        let mut out_shape = s.to_vec();
        out_shape[2] = out_h;
        out_shape[3] = out_w;
        Ok(Tensor::from_op(
            "bilinear_resize",
            out_shape,
            out,
            vec![self.clone()],
            Box::new(move |args: &BackwardArgs<'_, T>| {
                let mut g = vec![T::zero(); planes * in_h * in_w];
                let go = args.grad;
                for p in 0..planes {
                    let plane = &mut g[p * in_h * in_w..(p + 1) * in_h * in_w];
                    let gp = &go[p * out_h * out_w..(p + 1) * out_h * out_w];
                    for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
                        for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                            let v = gp[oy * out_w + ox];
                            let (top, bottom) = (v * (T::one() - ly), v * ly);
                            plane[y0 * in_w + x0] += top * (T::one() - lx);
                            plane[y0 * in_w + x1] += top * lx;
                            plane[y1 * in_w + x0] += bottom * (T::one() - lx);
                            plane[y1 * in_w + x1] += bottom * lx;
                        }
                    }
                }
                vec![Some(g)]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_is_identity() {
        let x = Tensor::<f64>::uniform(&[2, 3, 5, 7], -1.0, 1.0, &mut rand::rng());
        assert_eq!(x.bilinear_resize(5, 7).unwrap().data(), x.data());
    }

    #[test]
    fn single_pixel_extends_constant() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 1, 1], &[3.25]).unwrap();
        let y = x.bilinear_resize(4, 6).unwrap();
        assert!(y.data().iter().all(|&v| v == 3.25));
    }

    #[test]
    fn zero_target_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        assert!(x.bilinear_resize(0, 2).is_err());
    }

    /// Scalar reference: explicit half-pixel formula per output pixel.
    fn reference(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
        let coord = |i: usize, n_in: usize, n_out: usize| -> f64 {
            let s = (i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
            s.max(0.0).min((n_in - 1) as f64)
        };
        let mut out = Vec::new();
        for i in 0..oh {
            for j in 0..ow {
                let (sy, sx) = (coord(i, h, oh), coord(j, w, ow));
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                let (dy, dx) = (sy - y0 as f64, sx - x0 as f64);
                let v = src[y0 * w + x0] * (1.0 - dy) * (1.0 - dx)
                    + src[y0 * w + x1] * (1.0 - dy) * dx
                    + src[y1 * w + x0] * dy * (1.0 - dx)
                    + src[y1 * w + x1] * dy * dx;
                out.push(v);
            }
        }
        out
    }

    #[test]
    fn two_by_two_upsample_matches_reference() {
        let src = [0.0, 2.0, 4.0, 6.0];
        let expected = reference(&src, 2, 2, 4, 4);
        // Frozen values of the reference on this input.
        let frozen = [
            0.0, 0.5, 1.5, 2.0, //
            1.0, 1.5, 2.5, 3.0, //
            3.0, 3.5, 4.5, 5.0, //
            4.0, 4.5, 5.5, 6.0,
        ];
        assert_eq!(expected, frozen);
        let y = Tensor::<f64>::from_f64(&[1, 1, 2, 2], &src)
            .unwrap()
            .bilinear_resize(4, 4)
            .unwrap();
        for (a, b) in y.data().iter().zip(frozen) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn downsample_matches_reference() {
        let x = Tensor::<f64>::uniform(&[1, 1, 7, 9], -1.0, 1.0, &mut rand::rng());
        let y = x.bilinear_resize(3, 4).unwrap();
        let r = reference(x.data(), 7, 9, 3, 4);
        for (a, b) in y.data().iter().zip(r) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
