//! Depthwise convolutions on channel-last layouts.
//!
//! All convolutions are correlations (no kernel flip) with zero "same"
//! padding of `(k - 1) / 2` on each side, so output extents equal input
//! extents. Taps are visited in kernel order for every output element,
//! which makes interior outputs independent of their absolute position.

use crate::exec;
use crate::real::Real;

const TARGET_CHUNK: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims2d {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims1d {
    pub n: usize,
    pub t: usize,
    pub c: usize,
}

#[inline]
fn tap(pos: usize, k: usize, pad: usize, len: usize) -> Option<usize> {
    let p = (pos + k).checked_sub(pad)?;
    (p < len).then_some(p)
}

#[inline]
fn fma_row<F: Real>(out: &mut [F], a: &[F], b: &[F]) {
    for ((o, &x), &y) in out.iter_mut().zip(a).zip(b) {
        *o += x * y;
    }
}

/// `out[n,y,x,c] = sum_{i,j} in[n, y+i-p, x+j-p, c] * kernel[i,j,c]`.
pub fn dwconv2d<F: Real>(input: &[F], d: Dims2d, kernel: &[F], ks: usize, out: &mut [F]) {
    debug_assert_eq!(kernel.len(), ks * ks * d.c);
    let pad = (ks - 1) / 2;
    let row = d.w * d.c;
    let rows_per_chunk = (TARGET_CHUNK / row).max(1);
    exec::for_each_chunk(out, rows_per_chunk * row, |ci, chunk| {
        for (r, orow) in chunk.chunks_mut(row).enumerate() {
            let global = ci * rows_per_chunk + r;
            let (ni, y) = (global / d.h, global % d.h);
            orow.fill(F::zero());
            for ky in 0..ks {
                let Some(iy) = tap(y, ky, pad, d.h) else { continue };
                let in_row = &input[(ni * d.h + iy) * row..][..row];
                for xo in 0..d.w {
                    let o = &mut orow[xo * d.c..][..d.c];
                    for kx in 0..ks {
                        let Some(ix) = tap(xo, kx, pad, d.w) else { continue };
                        fma_row(o, &in_row[ix * d.c..][..d.c], &kernel[(ky * ks + kx) * d.c..][..d.c]);
                    }
                }
            }
        }
    });
}

/// Gradient of [`dwconv2d`] with respect to its input.
pub fn dwconv2d_grad_input<F: Real>(grad_out: &[F], d: Dims2d, kernel: &[F], ks: usize, out: &mut [F]) {
    let pad = (ks - 1) / 2;
    let row = d.w * d.c;
    let rows_per_chunk = (TARGET_CHUNK / row).max(1);
    exec::for_each_chunk(out, rows_per_chunk * row, |ci, chunk| {
        for (r, drow) in chunk.chunks_mut(row).enumerate() {
            let global = ci * rows_per_chunk + r;
            let (ni, iy) = (global / d.h, global % d.h);
            drow.fill(F::zero());
            for ky in 0..ks {
                // output row y with y + ky - pad == iy
                let Some(y) = (iy + pad).checked_sub(ky).filter(|&y| y < d.h) else {
                    continue;
                };
                let g_row = &grad_out[(ni * d.h + y) * row..][..row];
                for ix in 0..d.w {
                    let o = &mut drow[ix * d.c..][..d.c];
                    for kx in 0..ks {
                        let Some(x) = (ix + pad).checked_sub(kx).filter(|&x| x < d.w) else {
                            continue;
                        };
                        fma_row(o, &g_row[x * d.c..][..d.c], &kernel[(ky * ks + kx) * d.c..][..d.c]);
                    }
                }
            }
        }
    });
}

/// Gradient of [`dwconv2d`] with respect to its kernel. Partial sums are
/// formed per image and combined in image order.
pub fn dwconv2d_grad_kernel<F: Real>(input: &[F], grad_out: &[F], d: Dims2d, ks: usize) -> Vec<F> {
    let pad = (ks - 1) / 2;
    let row = d.w * d.c;
    let plane = d.h * row;
    let partials = exec::map_range(d.n, plane * ks * ks, |ni| {
        let mut acc = vec![F::zero(); ks * ks * d.c];
        let x = &input[ni * plane..][..plane];
        let g = &grad_out[ni * plane..][..plane];
        for ky in 0..ks {
            for kx in 0..ks {
                let a = &mut acc[(ky * ks + kx) * d.c..][..d.c];
                for y in 0..d.h {
                    let Some(iy) = tap(y, ky, pad, d.h) else { continue };
                    for xo in 0..d.w {
                        let Some(ix) = tap(xo, kx, pad, d.w) else { continue };
                        fma_row(a, &x[iy * row + ix * d.c..][..d.c], &g[y * row + xo * d.c..][..d.c]);
                    }
                }
            }
        }
        acc
    });
    sum_partials(partials, ks * ks * d.c)
}

/// `out[n,t,c] = sum_i in[n, t+i-p, c] * kernel[i,c]`.
pub fn dwconv1d<F: Real>(input: &[F], d: Dims1d, kernel: &[F], ks: usize, out: &mut [F]) {
    debug_assert_eq!(kernel.len(), ks * d.c);
    let pad = (ks - 1) / 2;
    let seq = d.t * d.c;
    let seqs_per_chunk = (TARGET_CHUNK / seq).max(1);
    exec::for_each_chunk(out, seqs_per_chunk * seq, |ci, chunk| {
        for (s, oseq) in chunk.chunks_mut(seq).enumerate() {
            let ni = ci * seqs_per_chunk + s;
            let x = &input[ni * seq..][..seq];
            oseq.fill(F::zero());
            for t in 0..d.t {
                let o = &mut oseq[t * d.c..][..d.c];
                for kt in 0..ks {
                    let Some(it) = tap(t, kt, pad, d.t) else { continue };
                    fma_row(o, &x[it * d.c..][..d.c], &kernel[kt * d.c..][..d.c]);
                }
            }
        }
    });
}

/// Gradient of [`dwconv1d`] with respect to its input.
pub fn dwconv1d_grad_input<F: Real>(grad_out: &[F], d: Dims1d, kernel: &[F], ks: usize, out: &mut [F]) {
    let pad = (ks - 1) / 2;
    let seq = d.t * d.c;
    let seqs_per_chunk = (TARGET_CHUNK / seq).max(1);
    exec::for_each_chunk(out, seqs_per_chunk * seq, |ci, chunk| {
        for (s, dseq) in chunk.chunks_mut(seq).enumerate() {
            let ni = ci * seqs_per_chunk + s;
            let g = &grad_out[ni * seq..][..seq];
            dseq.fill(F::zero());
            for it in 0..d.t {
                let o = &mut dseq[it * d.c..][..d.c];
                for kt in 0..ks {
                    let Some(t) = (it + pad).checked_sub(kt).filter(|&t| t < d.t) else {
                        continue;
                    };
                    fma_row(o, &g[t * d.c..][..d.c], &kernel[kt * d.c..][..d.c]);
                }
            }
        }
    });
}

/// Gradient of [`dwconv1d`] with respect to its kernel.
pub fn dwconv1d_grad_kernel<F: Real>(input: &[F], grad_out: &[F], d: Dims1d, ks: usize) -> Vec<F> {
    let pad = (ks - 1) / 2;
    let seq = d.t * d.c;
    // Group sequences so each partial covers a reasonable amount of work.
    let group = (TARGET_CHUNK / (seq * ks)).max(1);
    let groups = d.n.div_ceil(group);
    let partials = exec::map_range(groups, group * seq * ks, |gi| {
        let mut acc = vec![F::zero(); ks * d.c];
        for ni in gi * group..((gi + 1) * group).min(d.n) {
            let x = &input[ni * seq..][..seq];
            let g = &grad_out[ni * seq..][..seq];
            for kt in 0..ks {
                let a = &mut acc[kt * d.c..][..d.c];
                for t in 0..d.t {
                    let Some(it) = tap(t, kt, pad, d.t) else { continue };
                    fma_row(a, &x[it * d.c..][..d.c], &g[t * d.c..][..d.c]);
                }
            }
        }
        acc
    });
    sum_partials(partials, ks * d.c)
}

fn sum_partials<F: Real>(partials: Vec<Vec<F>>, len: usize) -> Vec<F> {
    let mut total = vec![F::zero(); len];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}
