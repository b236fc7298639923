//! Dense matrix products backed by `matrixmultiply`.
//!
//! Output rows are split into fixed blocks; each block is an independent
//! GEMM call, so chunking never changes the arithmetic of an element.

use crate::exec;
use crate::real::Real;

const ROW_BLOCK: usize = 64;

/// `out[p, n] = x[p, k] @ w[k, n]`.
pub fn matmul<F: Real>(x: &[F], p: usize, k: usize, w: &[F], n: usize, out: &mut [F]) {
    debug_assert_eq!(x.len(), p * k);
    debug_assert_eq!(w.len(), k * n);
    debug_assert_eq!(out.len(), p * n);
    exec::for_each_chunk(out, ROW_BLOCK * n, |ci, chunk| {
        let rows = chunk.len() / n;
        let xs = &x[ci * ROW_BLOCK * k..][..rows * k];
        // SAFETY: `xs` is rows x k, `w` is k x n and `chunk` is rows x n,
        // all row-major with the strides given.
        unsafe {
            F::gemm(
                rows,
                k,
                n,
                xs.as_ptr(),
                k as isize,
                1,
                w.as_ptr(),
                n as isize,
                1,
                F::zero(),
                chunk.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
}

/// `out[p, k] = dy[p, n] @ w[k, n]^T`.
pub fn matmul_nt<F: Real>(dy: &[F], p: usize, n: usize, w: &[F], k: usize, out: &mut [F]) {
    debug_assert_eq!(dy.len(), p * n);
    debug_assert_eq!(w.len(), k * n);
    debug_assert_eq!(out.len(), p * k);
    exec::for_each_chunk(out, ROW_BLOCK * k, |ci, chunk| {
        let rows = chunk.len() / k;
        let ds = &dy[ci * ROW_BLOCK * n..][..rows * n];
        // SAFETY: w^T is read as an n x k view of the k x n buffer.
        unsafe {
            F::gemm(
                rows,
                n,
                k,
                ds.as_ptr(),
                n as isize,
                1,
                w.as_ptr(),
                1,
                n as isize,
                F::zero(),
                chunk.as_mut_ptr(),
                k as isize,
                1,
            );
        }
    });
}

/// `out[k, n] = x[p, k]^T @ dy[p, n]`.
pub fn matmul_tn<F: Real>(x: &[F], p: usize, k: usize, dy: &[F], n: usize, out: &mut [F]) {
    debug_assert_eq!(x.len(), p * k);
    debug_assert_eq!(dy.len(), p * n);
    debug_assert_eq!(out.len(), k * n);
    exec::for_each_chunk(out, ROW_BLOCK * n, |ci, chunk| {
        let rows = chunk.len() / n;
        let col0 = ci * ROW_BLOCK;
        // SAFETY: x^T restricted to columns col0..col0+rows is a rows x p
        // view with row stride 1 and column stride k.
        unsafe {
            F::gemm(
                rows,
                p,
                n,
                x.as_ptr().add(col0),
                1,
                k as isize,
                dy.as_ptr(),
                n as isize,
                1,
                F::zero(),
                chunk.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
}

/// Column sums of a `[p, n]` matrix, accumulated in row order.
pub fn column_sums<F: Real>(m: &[F], p: usize, n: usize) -> Vec<F> {
    debug_assert_eq!(m.len(), p * n);
    let mut out = vec![F::zero(); n];
    for row in m.chunks_exact(n) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(x: &[f64], p: usize, k: usize, w: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; p * n];
        for i in 0..p {
            for j in 0..n {
                for l in 0..k {
                    out[i * n + j] += x[i * k + l] * w[l * n + j];
                }
            }
        }
        out
    }

    fn seq(n: usize, seed: u64) -> Vec<f64> {
        (0..n)
            .map(|i| (((i as u64 * 2654435761 + seed) % 1000) as f64) / 500.0 - 1.0)
            .collect()
    }

    #[test]
    fn products_match_naive() {
        let (p, k, n) = (150, 7, 5);
        let x = seq(p * k, 1);
        let w = seq(k * n, 2);
        let mut out = vec![0.0; p * n];
        matmul(&x, p, k, &w, n, &mut out);
        let want = naive(&x, p, k, &w, n);
        for (a, b) in out.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }

        // dy @ w^T
        let dy = seq(p * n, 3);
        let mut dx = vec![0.0; p * k];
        matmul_nt(&dy, p, n, &w, k, &mut dx);
        let mut wt = vec![0.0; n * k];
        for l in 0..k {
            for j in 0..n {
                wt[j * k + l] = w[l * n + j];
            }
        }
        let want = naive(&dy, p, n, &wt, k);
        for (a, b) in dx.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }

        // x^T @ dy
        let mut dw = vec![0.0; k * n];
        matmul_tn(&x, p, k, &dy, n, &mut dw);
        let mut xt = vec![0.0; k * p];
        for i in 0..p {
            for l in 0..k {
                xt[l * p + i] = x[i * k + l];
            }
        }
        let want = naive(&xt, k, p, &dy, n);
        for (a, b) in dw.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn row_blocking_is_bit_stable() {
        let (p, k, n) = (300, 33, 17);
        let x = seq(p * k, 5);
        let w = seq(k * n, 6);
        let mut a = vec![0.0; p * n];
        let mut b = vec![0.0; p * n];
        exec::with_parallel(false, || matmul(&x, p, k, &w, n, &mut a));
        exec::with_parallel(true, || matmul(&x, p, k, &w, n, &mut b));
        assert_eq!(a, b);
        // A row computed alone equals the same row computed inside a block.
        let mut single = vec![0.0; n];
        matmul(&x[131 * k..132 * k], 1, k, &w, n, &mut single);
        assert_eq!(&a[131 * n..132 * n], &single[..]);
    }
}
