//! Batched matrix multiplication.
//!
//! Kernels use the `i-p-j` loop order so the innermost loop runs over
//! contiguous output columns. Every output row is produced by exactly one thread in a fixed
//! order, so results do not depend on the thread count.

use std::sync::OnceLock;

use super::{numel, BackwardArgs, Scalar, Tensor};
use crate::error::{Error, Result};

/// Kernel thread count, read once from `KTDA_THREADS` (default 1).
pub fn kernel_threads() -> usize {
    static THREADS: OnceLock<usize> = OnceLock::new();
    *THREADS.get_or_init(|| {
        std::env::var("KTDA_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
            .filter(|&n: &usize| n >= 1)
            .unwrap_or(1)
    })
}

const PARALLEL_MIN_WORK: usize = 1 << 18;

/// Splits the rows of `c` (each `n` wide) across kernel threads.
fn par_rows<T: Scalar>(c: &mut [T], m: usize, n: usize, work: usize, f: impl Fn(usize, &mut [T]) + Sync) {
    let threads = kernel_threads().min(m);
    if threads <= 1 || work < PARALLEL_MIN_WORK {
        f(0, c);
        return;
    }
    let rows_per = m.div_ceil(threads);
    std::thread::scope(|s| {
        for (t, chunk) in c.chunks_mut(rows_per * n).enumerate() {
            let f = &f;
            s.spawn(move || f(t * rows_per, chunk));
        }
    });
}

const TILE_ROWS: usize = 4;
const TILE_COLS: usize = 16;

/// Adds `A * b` into the `rows x n` block `c`, where `A[r, p]` lives at
/// `a[(row0 + r) * row_stride + p * col_stride]`.
///
/// Full 4x16 tiles accumulate in a local array so the compiler can keep
/// them in registers. Every output element still sums its terms in
/// increasing `p` order, so tiled and untiled paths agree bit for bit.
#[allow(clippy::too_many_arguments)]
fn gemm_block<T: Scalar>(
    a: &[T],
    row_stride: usize,
    col_stride: usize,
    b: &[T],
    c: &mut [T],
    row0: usize,
    rows: usize,
    k: usize,
    n: usize,
) {
    let full_rows = rows - rows % TILE_ROWS;
    let full_cols = n - n % TILE_COLS;
    for r0 in (0..full_rows).step_by(TILE_ROWS) {
        for j0 in (0..full_cols).step_by(TILE_COLS) {
            let mut acc = [[T::zero(); TILE_COLS]; TILE_ROWS];
            for (r, acc_row) in acc.iter_mut().enumerate() {
                acc_row.copy_from_slice(&c[(r0 + r) * n + j0..][..TILE_COLS]);
            }
            for p in 0..k {
                let brow: &[T; TILE_COLS] = b[p * n + j0..][..TILE_COLS].try_into().unwrap();
                for (r, acc_row) in acc.iter_mut().enumerate() {
                    let av = a[(row0 + r0 + r) * row_stride + p * col_stride];
                    for j in 0..TILE_COLS {
                        acc_row[j] += av * brow[j];
                    }
                }
            }
            for (r, acc_row) in acc.iter().enumerate() {
                c[(r0 + r) * n + j0..][..TILE_COLS].copy_from_slice(acc_row);
            }
        }
        if full_cols < n {
            for r in r0..r0 + TILE_ROWS {
                axpy_row(a, row_stride, col_stride, b, c, row0, r, k, n, full_cols);
            }
        }
    }
    for r in full_rows..rows {
        axpy_row(a, row_stride, col_stride, b, c, row0, r, k, n, 0);
    }
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn axpy_row<T: Scalar>(
    a: &[T],
    row_stride: usize,
    col_stride: usize,
    b: &[T],
    c: &mut [T],
    row0: usize,
    r: usize,
    k: usize,
    n: usize,
    j0: usize,
) {
    let crow = &mut c[r * n + j0..(r + 1) * n];
    for p in 0..k {
        let av = a[(row0 + r) * row_stride + p * col_stride];
        for (cj, &bj) in crow.iter_mut().zip(&b[p * n + j0..(p + 1) * n]) {
            *cj += av * bj;
        }
    }
}

/// `c[m,n] += a[m,k] * b[k,n]`
pub(crate) fn gemm_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    par_rows(c, m, n, m * k * n, |row0, c| {
        let rows = c.len() / n.max(1);
        gemm_block(a, k, 1, b, c, row0, rows, k, n);
    });
}

/// `c[m,n] += a[k,m]^T * b[k,n]`
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], k: usize, m: usize, n: usize) {
    par_rows(c, m, n, m * k * n, |row0, c| {
        let rows = c.len() / n.max(1);
        gemm_block(a, 1, m, b, c, row0, rows, k, n);
    });
}

pub(crate) fn transpose2d<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

/// `c[m,n] += a[m,k] * b[n,k]^T`
pub(crate) fn gemm_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let bt = transpose2d(b, n, k);
    gemm_nn(a, &bt, c, m, k, n);
}

#[derive(Clone, Copy)]
enum Layout {
    /// `a` has batch dims, `b` is a shared matrix.
    SharedRhs,
    /// `a` is a shared matrix, `b` has batch dims.
    SharedLhs,
    /// Matching batch dims on both sides.
    Batched,
}

impl<T: Scalar> Tensor<T> {
    /// `[.., M, K] x [.., K, N] -> [.., M, N]`. Either side may be a plain
    /// matrix shared across the other side's batch dimensions.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::invalid("matmul", format!("operands must be at least 2-D, got {sa:?} and {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::invalid("matmul", format!("inner dimensions differ: {sa:?} x {sb:?}")));
        }
        let (layout, batch_dims) = if sb.len() == 2 {
            (Layout::SharedRhs, &sa[..sa.len() - 2])
        } else if sa.len() == 2 {
            (Layout::SharedLhs, &sb[..sb.len() - 2])
        } else if sa[..sa.len() - 2] == sb[..sb.len() - 2] {
            (Layout::Batched, &sa[..sa.len() - 2])
        } else {
            return Err(Error::shape("matmul", sa, sb));
        };
        let batch = numel(batch_dims);
        let mut out_shape = batch_dims.to_vec();
        out_shape.extend([m, n]);
        let (x, y) = (self.data(), other.data());
        let mut c = vec![T::zero(); batch * m * n];
        match layout {
            Layout::SharedRhs => gemm_nn(x, y, &mut c, batch * m, k, n),
            Layout::SharedLhs => {
                for bi in 0..batch {
                    gemm_nn(x, &y[bi * k * n..(bi + 1) * k * n], &mut c[bi * m * n..(bi + 1) * m * n], m, k, n);
                }
            }
            Layout::Batched => {
                for bi in 0..batch {
                    gemm_nn(
                        &x[bi * m * k..(bi + 1) * m * k],
                        &y[bi * k * n..(bi + 1) * k * n],
                        &mut c[bi * m * n..(bi + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
            }
        }
        Ok(Tensor::from_op(
            "matmul",
            out_shape,
            c,
            vec![self.clone(), other.clone()],
            Box::new(move |args: &BackwardArgs<'_, T>| {
                let (a, b) = (&args.parents[0], &args.parents[1]);
                let (x, y, g) = (a.data(), b.data(), args.grad);
                let mut ga = a.requires_grad().then(|| vec![T::zero(); a.numel()]);
                let mut gb = b.requires_grad().then(|| vec![T::zero(); b.numel()]);
                match layout {
                    Layout::SharedRhs => {
                        if let Some(ga) = ga.as_mut() {
                            gemm_nt(g, y, ga, batch * m, n, k);
                        }
                        if let Some(gb) = gb.as_mut() {
                            gemm_tn(x, g, gb, batch * m, k, n);
                        }
                    }
                    Layout::SharedLhs | Layout::Batched => {
                        let shared = matches!(layout, Layout::SharedLhs);
                        for bi in 0..batch {
                            let gs = &g[bi * m * n..(bi + 1) * m * n];
                            let a_off = if shared { 0 } else { bi * m * k };
                            let xs = &x[a_off..a_off + m * k];
                            let ys = &y[bi * k * n..(bi + 1) * k * n];
                            if let Some(ga) = ga.as_mut() {
                                gemm_nt(gs, ys, &mut ga[a_off..a_off + m * k], m, n, k);
                            }
                            if let Some(gb) = gb.as_mut() {
                                gemm_tn(xs, gs, &mut gb[bi * k * n..(bi + 1) * k * n], m, k, n);
                            }
                        }
                    }
                }
                vec![ga, gb]
            }),
        ))
    }
}
