//! Point-wise activations, broadcast products, gated sums and the
//! classification loss.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::exec;
use crate::real::Real;

const CHUNK: usize = 8192;

/// Exact GeLU: `x * Phi(x)`.
#[inline]
pub fn gelu_scalar<F: Real>(x: F) -> F {
    let half = F::of(0.5);
    half * x * (F::one() + (x * F::of(FRAC_1_SQRT_2)).erf())
}

#[inline]
pub fn gelu_grad_scalar<F: Real>(x: F) -> F {
    let half = F::of(0.5);
    let cdf = half * (F::one() + (x * F::of(FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * F::of(1.0 / (2.0 * PI).sqrt());
    cdf + x * pdf
}

pub fn gelu<F: Real>(x: &[F], out: &mut [F]) {
    exec::for_each_chunk(out, CHUNK, |ci, chunk| {
        let xs = &x[ci * CHUNK..][..chunk.len()];
        for (o, &v) in chunk.iter_mut().zip(xs) {
            *o = gelu_scalar(v);
        }
    });
}

pub fn gelu_backward<F: Real>(x: &[F], grad_out: &[F], out: &mut [F]) {
    exec::for_each_chunk(out, CHUNK, |ci, chunk| {
        let xs = &x[ci * CHUNK..][..chunk.len()];
        let gs = &grad_out[ci * CHUNK..][..chunk.len()];
        for ((o, &v), &g) in chunk.iter_mut().zip(xs).zip(gs) {
            *o = g * gelu_grad_scalar(v);
        }
    });
}

/// GeLU that also returns `Phi(x)`, so the backward pass skips the erf.
pub fn gelu_with_cdf<F: Real>(x: &[F], out: &mut [F], cdf: &mut [F]) {
    let half = F::of(0.5);
    exec::for_each_chunk(cdf, CHUNK, |ci, chunk| {
        let xs = &x[ci * CHUNK..][..chunk.len()];
        for (c, &v) in chunk.iter_mut().zip(xs) {
            *c = half * (F::one() + (v * F::of(FRAC_1_SQRT_2)).erf());
        }
    });
    for ((o, &c), &v) in out.iter_mut().zip(cdf.iter()).zip(x) {
        *o = v * c;
    }
}

/// [`gelu_backward`] from a cached `Phi(x)`.
pub fn gelu_backward_cdf<F: Real>(x: &[F], cdf: &[F], grad_out: &[F], out: &mut [F]) {
    let half = F::of(0.5);
    let norm = F::of(1.0 / (2.0 * PI).sqrt());
    exec::for_each_chunk(out, CHUNK, |ci, chunk| {
        let n = chunk.len();
        let (xs, cs, gs) = (
            &x[ci * CHUNK..][..n],
            &cdf[ci * CHUNK..][..n],
            &grad_out[ci * CHUNK..][..n],
        );
        for (i, o) in chunk.iter_mut().enumerate() {
            let v = xs[i];
            *o = gs[i] * (cs[i] + v * (-(v * v) * half).exp() * norm);
        }
    });
}

/// `out[p, c] = sum_l gates[p, l] * levels[l][p, c]`, accumulated in level
/// order starting from zero.
pub fn gated_sum<F: Real>(levels: &[&[F]], gates: &[F], c: usize, out: &mut [F]) {
    let nl = levels.len();
    let rows_per_chunk = (CHUNK / c).max(1);
    exec::for_each_chunk(out, rows_per_chunk * c, |ci, chunk| {
        for (r, orow) in chunk.chunks_mut(c).enumerate() {
            let p = ci * rows_per_chunk + r;
            orow.fill(F::zero());
            for (l, level) in levels.iter().enumerate() {
                let g = gates[p * nl + l];
                for (o, &z) in orow.iter_mut().zip(&level[p * c..][..c]) {
                    *o += z * g;
                }
            }
        }
    });
}

/// Gradient of [`gated_sum`] with respect to the gates.
pub fn gated_sum_grad_gates<F: Real>(levels: &[&[F]], grad_out: &[F], c: usize) -> Vec<F> {
    let nl = levels.len();
    let positions = grad_out.len() / c;
    let mut dg = vec![F::zero(); positions * nl];
    let rows_per_chunk = (CHUNK / (c * nl)).max(1);
    exec::for_each_chunk(&mut dg, rows_per_chunk * nl, |ci, chunk| {
        for (r, drow) in chunk.chunks_mut(nl).enumerate() {
            let p = ci * rows_per_chunk + r;
            let g = &grad_out[p * c..][..c];
            for (l, level) in levels.iter().enumerate() {
                drow[l] = level[p * c..][..c].iter().zip(g).map(|(&z, &d)| z * d).sum();
            }
        }
    });
    dg
}

/// Gradient of [`gated_sum`] with respect to level `l`.
pub fn gated_sum_grad_level<F: Real>(gates: &[F], nl: usize, l: usize, grad_out: &[F], c: usize) -> Vec<F> {
    let mut dz = vec![F::zero(); grad_out.len()];
    let rows_per_chunk = (CHUNK / c).max(1);
    exec::for_each_chunk(&mut dz, rows_per_chunk * c, |ci, chunk| {
        for (r, drow) in chunk.chunks_mut(c).enumerate() {
            let p = ci * rows_per_chunk + r;
            let g = gates[p * nl + l];
            for (d, &go) in drow.iter_mut().zip(&grad_out[p * c..][..c]) {
                *d = go * g;
            }
        }
    });
    dz
}

/// Numerically stable softmax of one row.
pub fn softmax<F: Real>(z: &[F]) -> Vec<F> {
    let max = z.iter().copied().fold(F::neg_infinity(), F::max);
    let e: Vec<F> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: F = e.iter().copied().sum();
    e.into_iter().map(|v| v / sum).collect()
}

/// Mean soft-target cross-entropy over rows of `[b, k]` logits.
/// Returns the loss and the row-wise softmax probabilities.
pub fn softmax_cross_entropy<F: Real>(logits: &[F], targets: &[F], k: usize) -> (F, Vec<F>) {
    let b = logits.len() / k;
    let mut probs = vec![F::zero(); logits.len()];
    let mut loss = F::zero();
    for r in 0..b {
        let z = &logits[r * k..][..k];
        let t = &targets[r * k..][..k];
        let max = z.iter().copied().fold(F::neg_infinity(), F::max);
        let sum_exp: F = z.iter().map(|&v| (v - max).exp()).sum();
        let log_norm = max + sum_exp.ln();
        for j in 0..k {
            probs[r * k + j] = (z[j] - log_norm).exp();
            loss -= t[j] * (z[j] - log_norm);
        }
    }
    (loss / F::of(b as f64), probs)
}

/// Label-smoothed one-hot row: `1 - eps` on the true class and
/// `eps / (k - 1)` elsewhere.
pub fn smoothed_one_hot<F: Real>(class: usize, k: usize, eps: f64) -> Vec<F> {
    if k == 1 {
        return vec![F::one()];
    }
    let off = eps / (k - 1) as f64;
    (0..k)
        .map(|j| F::of(if j == class { 1.0 - eps } else { off }))
        .collect()
}
