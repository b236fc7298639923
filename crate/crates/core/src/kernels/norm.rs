//! Layer normalization over the last axis.

use crate::exec;
use crate::real::Real;

pub const LAYER_NORM_EPS: f64 = 1e-5;

const ROWS_PER_CHUNK: usize = 64;

/// Normalizes each row of length `c`; returns per-row `(mean, rstd)`.
pub fn layer_norm<F: Real>(x: &[F], c: usize, gamma: &[F], beta: &[F], out: &mut [F]) -> Vec<(F, F)> {
    let rows = x.len() / c;
    let eps = F::of(LAYER_NORM_EPS);
    let inv_c = F::one() / F::of(c as f64);
    let mut stats = vec![(F::zero(), F::zero()); rows];
    let stats_ptr = SyncPtr(stats.as_mut_ptr());
    exec::for_each_chunk(out, ROWS_PER_CHUNK * c, |ci, chunk| {
        for (r, orow) in chunk.chunks_mut(c).enumerate() {
            let row = ci * ROWS_PER_CHUNK + r;
            let xr = &x[row * c..][..c];
            let mean = xr.iter().copied().sum::<F>() * inv_c;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_c;
            let rstd = F::one() / (var + eps).sqrt();
            for (((o, &v), &g), &b) in orow.iter_mut().zip(xr).zip(gamma).zip(beta) {
                *o = (v - mean) * rstd * g + b;
            }
            // SAFETY: each row index is written by exactly one chunk.
            unsafe { *stats_ptr.get().add(row) = (mean, rstd) };
        }
    });
    stats
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward<F: Real>(
    x: &[F],
    c: usize,
    gamma: &[F],
    stats: &[(F, F)],
    grad_out: &[F],
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let rows = x.len() / c;
    let inv_c = F::one() / F::of(c as f64);
    let mut dx = vec![F::zero(); x.len()];
    exec::for_each_chunk(&mut dx, ROWS_PER_CHUNK * c, |ci, chunk| {
        for (r, drow) in chunk.chunks_mut(c).enumerate() {
            let row = ci * ROWS_PER_CHUNK + r;
            let (mean, rstd) = stats[row];
            let xr = &x[row * c..][..c];
            let gr = &grad_out[row * c..][..c];
            let mut sum_dxhat = F::zero();
            let mut sum_dxhat_xhat = F::zero();
            for i in 0..c {
                let xhat = (xr[i] - mean) * rstd;
                let dxhat = gr[i] * gamma[i];
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
            }
            let m1 = sum_dxhat * inv_c;
            let m2 = sum_dxhat_xhat * inv_c;
            for i in 0..c {
                let xhat = (xr[i] - mean) * rstd;
                drow[i] = rstd * (gr[i] * gamma[i] - m1 - xhat * m2);
            }
        }
    });
    let chunks = rows.div_ceil(ROWS_PER_CHUNK);
    let partials = exec::map_range(chunks, ROWS_PER_CHUNK * c, |ci| {
        let mut dg = vec![F::zero(); c];
        let mut db = vec![F::zero(); c];
        for row in ci * ROWS_PER_CHUNK..((ci + 1) * ROWS_PER_CHUNK).min(rows) {
            let (mean, rstd) = stats[row];
            let xr = &x[row * c..][..c];
            let gr = &grad_out[row * c..][..c];
            for i in 0..c {
                dg[i] += gr[i] * (xr[i] - mean) * rstd;
                db[i] += gr[i];
            }
        }
        (dg, db)
    });
    let mut dgamma = vec![F::zero(); c];
    let mut dbeta = vec![F::zero(); c];
    for (dg, db) in partials {
        for i in 0..c {
            dgamma[i] += dg[i];
            dbeta[i] += db[i];
        }
    }
    (dx, dgamma, dbeta)
}

#[derive(Clone, Copy)]
struct SyncPtr<T>(*mut T);

impl<T> SyncPtr<T> {
    fn get(self) -> *mut T {
        self.0
    }
}

// SAFETY: used only for disjoint per-row writes.
unsafe impl<T> Send for SyncPtr<T> {}
unsafe impl<T> Sync for SyncPtr<T> {}
