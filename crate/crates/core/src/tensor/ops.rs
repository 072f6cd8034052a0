//! Elementwise arithmetic with broadcasting, activations, reductions and
//! shape manipulation.

use super::{numel, BackwardArgs, Scalar, Tensor};
use crate::error::{Error, Result};

/// Output shape under trailing-dimension broadcasting. Missing leading
/// dimensions count as 1.
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape(op, a, b)),
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside `out`, zero along broadcast dimensions.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + offset] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visits every output element with the matching flat offsets into `a` and `b`.
fn for_each_broadcast(
    out: &[usize],
    a_strides: &[usize],
    b_strides: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total = numel(out);
    if total == 0 {
        return;
    }
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[rank - 1];
    let (sa, sb) = (a_strides[rank - 1], b_strides[rank - 1]);
    let mut counter = vec![0usize; rank - 1];
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut o = 0;
    while o < total {
        for j in 0..inner {
            f(o + j, ia + j * sa, ib + j * sb);
        }
        o += inner;
        for d in (0..rank - 1).rev() {
            counter[d] += 1;
            ia += a_strides[d];
            ib += b_strides[d];
            if counter[d] < out[d] {
                break;
            }
            ia -= a_strides[d] * out[d];
            ib -= b_strides[d] * out[d];
            counter[d] = 0;
        }
    }
}

type Partial<T> = fn(T, T) -> T;

impl<T: Scalar> Tensor<T> {
    fn binary(
        &self,
        other: &Tensor<T>,
        op: &'static str,
        f: fn(T, T) -> T,
        da: Partial<T>,
        db: Partial<T>,
    ) -> Result<Tensor<T>> {
        let out_shape = broadcast_shape(op, self.shape(), other.shape())?;
        let (x, y) = (self.data(), other.data());
        let data = if self.shape() == other.shape() {
            x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect()
        } else {
            let sa = broadcast_strides(self.shape(), &out_shape);
            let sb = broadcast_strides(other.shape(), &out_shape);
            let mut data = vec![T::zero(); numel(&out_shape)];
            for_each_broadcast(&out_shape, &sa, &sb, |o, i, j| data[o] = f(x[i], y[j]));
            data
        };
        Ok(Tensor::from_op(
            op,
            out_shape,
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |args: &BackwardArgs<'_, T>| {
                let (a, b) = (&args.parents[0], &args.parents[1]);
                let (x, y, g) = (a.data(), b.data(), args.grad);
                let mut ga = a.requires_grad().then(|| vec![T::zero(); a.numel()]);
                let mut gb = b.requires_grad().then(|| vec![T::zero(); b.numel()]);
                if a.shape() == b.shape() {
                    for i in 0..g.len() {
                        if let Some(ga) = ga.as_mut() {
                            ga[i] = g[i] * da(x[i], y[i]);
                        }
                        if let Some(gb) = gb.as_mut() {
                            gb[i] = g[i] * db(x[i], y[i]);
                        }
                    }
                } else {
                    let sa = broadcast_strides(a.shape(), args.output_shape);
                    let sb = broadcast_strides(b.shape(), args.output_shape);
                    for_each_broadcast(args.output_shape, &sa, &sb, |o, i, j| {
                        if let Some(ga) = ga.as_mut() {
                            ga[i] += g[o] * da(x[i], y[j]);
                        }
                        if let Some(gb) = gb.as_mut() {
                            gb[j] += g[o] * db(x[i], y[j]);
                        }
                    });
                }
                vec![ga, gb]
            }),
        ))
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, "add", |x, y| x + y, |_, _| T::one(), |_, _| T::one())
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, "sub", |x, y| x - y, |_, _| T::one(), |_, _| -T::one())
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, "mul", |x, y| x * y, |_, y| y, |x, _| x)
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(
            other,
            "div",
            |x, y| x / y,
            |_, y| T::one() / y,
            |x, y| -x / (y * y),
        )
    }

    /// Elementwise map with derivative `df(x, y)` where `y = f(x)`.
    pub fn unary(
        &self,
        op: &'static str,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + Send + Sync + 'static,
    ) -> Tensor<T> {
        let data = self.data().iter().map(|&v| f(v)).collect();
        Tensor::from_op(
            op,
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |args: &BackwardArgs<'_, T>| {
                let x = args.parents[0].data();
                let g = x
                    .iter()
                    .zip(args.output)
                    .zip(args.grad)
                    .map(|((&x, &y), &g)| g * df(x, y))
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    pub fn neg(&self) -> Tensor<T> {
        self.unary("neg", |x| -x, |_, _| -T::one())
    }

    pub fn scale(&self, s: T) -> Tensor<T> {
        self.unary("scale", move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(&self, s: T) -> Tensor<T> {
        self.unary("add_scalar", move |x| x + s, |_, _| T::one())
    }

    pub fn square(&self) -> Tensor<T> {
        self.unary("square", |x| x * x, |x, _| x + x)
    }

    pub fn exp(&self) -> Tensor<T> {
        self.unary("exp", |x| x.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Tensor<T> {
        self.unary("ln", |x| x.ln(), |x, _| T::one() / x)
    }

    pub fn sqrt(&self) -> Tensor<T> {
        self.unary("sqrt", |x| x.sqrt(), |_, y| T::c(0.5) / y)
    }

    pub fn relu(&self) -> Tensor<T> {
        self.unary(
            "relu",
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor<T> {
        let k = T::c((2.0 / std::f64::consts::PI).sqrt());
        let c = T::c(0.044715);
        let half = T::c(0.5);
        self.unary(
            "gelu",
            move |x| half * x * (T::one() + (k * (x + c * x * x * x)).tanh()),
            move |x, _| {
                let t = (k * (x + c * x * x * x)).tanh();
                let dt = (T::one() - t * t) * k * (T::one() + T::c(3.0) * c * x * x);
                half * (T::one() + t) + half * x * dt
            },
        )
    }

    pub fn sum(&self) -> Tensor<T> {
        let s = self.data().iter().copied().sum();
        Tensor::from_op(
            "sum",
            Vec::new(),
            vec![s],
            vec![self.clone()],
            Box::new(|args: &BackwardArgs<'_, T>| {
                vec![Some(vec![args.grad[0]; args.parents[0].numel()])]
            }),
        )
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = T::from_usize(self.numel().max(1)).unwrap();
        self.sum().scale(T::one() / n)
    }

    /// Sums over `axis`, keeping it as a size-1 dimension when `keepdim`.
    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor<T>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::invalid("sum_axis", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(shape, axis);
        let x = self.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &x[(o * len + a) * inner..(o * len + a + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
            }
        }
        let mut out_shape = shape.to_vec();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        Ok(Tensor::from_op(
            "sum_axis",
            out_shape,
            out,
            vec![self.clone()],
            Box::new(move |args: &BackwardArgs<'_, T>| {
                let mut g = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for a in 0..len {
                        g[(o * len + a) * inner..(o * len + a + 1) * inner]
                            .copy_from_slice(&args.grad[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor<T>> {
        let len = *self
            .shape()
            .get(axis)
            .ok_or_else(|| Error::invalid("mean_axis", "axis out of range"))?;
        Ok(self.sum_axis(axis, keepdim)?.scale(T::one() / T::from_usize(len).unwrap()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(|args: &BackwardArgs<'_, T>| vec![Some(args.grad.to_vec())]),
        ))
    }

    /// Reorders dimensions: output dimension `i` is input dimension `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        let shape = self.shape();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid("permute", format!("{perm:?} is not a permutation for {shape:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let data = permute_data(self.data(), shape, perm);
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        Ok(Tensor::from_op(
            "permute",
            out_shape,
            data,
            vec![self.clone()],
            Box::new(move |args: &BackwardArgs<'_, T>| {
                vec![Some(permute_data(args.grad, args.output_shape, &inverse))]
            }),
        ))
    }

    /// Swaps the last two dimensions.
    pub fn transpose(&self) -> Result<Tensor<T>> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::invalid("transpose", "rank < 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    /// Joins tensors along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::invalid("concat", "axis out of range"));
        }
        for p in parts {
            let ok = p.rank() == rank
                && (0..rank).all(|d| d == axis || p.shape()[d] == first.shape()[d]);
            if !ok {
                return Err(Error::shape("concat", first.shape(), p.shape()));
            }
        }
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for (p, &len) in parts.iter().zip(&lens) {
                data.extend_from_slice(&p.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        Ok(Tensor::from_op(
            "concat",
            out_shape,
            data,
            parts.to_vec(),
            Box::new(move |args: &BackwardArgs<'_, T>| {
                let mut grads: Vec<Vec<T>> =
                    lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (g, &len) in grads.iter_mut().zip(&lens) {
                        g.extend_from_slice(&args.grad[pos..pos + len * inner]);
                        pos += len * inner;
                    }
                }
                grads
                    .into_iter()
                    .zip(args.parents)
                    .map(|(g, p)| p.requires_grad().then_some(g))
                    .collect()
            }),
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::invalid(
                "narrow",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, full, inner) = split_axis(shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        Ok(Tensor::from_op(
            "narrow",
            out_shape,
            data,
            vec![self.clone()],
            Box::new(move |args: &BackwardArgs<'_, T>| {
                let mut g = vec![T::zero(); outer * full * inner];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    g[base..base + len * inner]
                        .copy_from_slice(&args.grad[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(g)]
            }),
        ))
    }
}

/// `(outer, axis_len, inner)` element counts around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn permute_data<T: Copy + Default>(x: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    if rank == 0 || perm.iter().enumerate().all(|(i, &p)| i == p) {
        return x.to_vec();
    }
    let mut in_strides = vec![1; rank];
    for i in (0..rank - 1).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut counter = vec![0usize; rank - 1];
    let mut base = 0usize;
    while out.len() < x.len() {
        out.extend((0..inner).map(|j| x[base + j * inner_stride]));
        for d in (0..rank - 1).rev() {
            counter[d] += 1;
            base += src_strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            base -= src_strides[d] * out_shape[d];
            counter[d] = 0;
        }
    }
    out
}
