//! Reductions, broadcasting helpers and axis permutation.

use crate::real::Real;
use crate::tensor::{numel, strides};

/// Running sum that keeps the exact value as a list of non-overlapping
/// partials and rounds once at the end.
///
/// The result is the correctly rounded sum of the inputs, so it does not
/// depend on the order they were added in.
#[derive(Clone, Debug, Default)]
pub struct ExactAccumulator<F> {
    partials: Vec<F>,
}

impl<F: Real> ExactAccumulator<F> {
    pub fn new() -> Self {
        ExactAccumulator {
            partials: Vec::with_capacity(4),
        }
    }

    pub fn clear(&mut self) {
        self.partials.clear();
    }

    pub fn add(&mut self, mut x: F) {
        let mut kept = 0;
        for j in 0..self.partials.len() {
            let mut y = self.partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != F::zero() {
                self.partials[kept] = lo;
                kept += 1;
            }
            x = hi;
        }
        self.partials.truncate(kept);
        self.partials.push(x);
    }

    pub fn value(&self) -> F {
        let p = &self.partials;
        if p.is_empty() {
            return F::zero();
        }
        let mut n = p.len() - 1;
        let mut hi = p[n];
        let mut lo = F::zero();
        while n > 0 {
            let x = hi;
            n -= 1;
            let y = p[n];
            hi = x + y;
            let yr = hi - x;
            lo = y - yr;
            if lo != F::zero() {
                break;
            }
        }
        let zero = F::zero();
        if n > 0 && ((lo < zero && p[n - 1] < zero) || (lo > zero && p[n - 1] > zero)) {
            let y = lo + lo;
            let x = hi + y;
            if x - hi == y {
                hi = x;
            }
        }
        hi
    }
}

/// Correctly rounded sum of `xs`.
pub fn exact_sum<F: Real>(xs: impl IntoIterator<Item = F>) -> F {
    let mut acc = ExactAccumulator::new();
    for x in xs {
        acc.add(x);
    }
    acc.value()
}

/// Moves axes into the order given by `perm`: output axis `i` is input
/// axis `perm[i]`.
pub fn permute<T: Copy>(x: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let rank = shape.len();
    debug_assert_eq!(perm.len(), rank);
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = numel(shape);
    let mut out = Vec::with_capacity(total);
    if rank == 0 {
        out.extend_from_slice(x);
        return (out_shape, out);
    }
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    while out.len() < total {
        if inner_stride == 1 {
            out.extend_from_slice(&x[base..base + inner]);
        } else {
            out.extend((0..inner).map(|i| x[base + i * inner_stride]));
        }
        // advance the outer odometer
        let mut ax = rank - 1;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            base += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Strides of `shape` viewed as broadcast into a same-rank output: size-1
/// axes get stride 0.
pub fn broadcast_strides(shape: &[usize]) -> Vec<usize> {
    strides(shape)
        .into_iter()
        .zip(shape)
        .map(|(s, &d)| if d == 1 { 0 } else { s })
        .collect()
}

/// Visits every output position in row-major order together with the
/// matching offsets into two broadcast operands.
pub fn for_each_broadcast(
    out_shape: &[usize],
    a_strides: &[usize],
    b_strides: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out_shape.len();
    let total = numel(out_shape);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for i in 0..total {
        f(i, oa, ob);
        let mut ax = rank;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            oa += a_strides[ax];
            ob += b_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            oa -= a_strides[ax] * out_shape[ax];
            ob -= b_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

/// Sums `x` (of `shape`) down to `target`, a same-rank shape whose axes
/// are either equal to `shape` or 1.
pub fn sum_to_shape<F: Real>(x: &[F], shape: &[usize], target: &[usize]) -> Vec<F> {
    if shape == target {
        return x.to_vec();
    }
    let mut out = vec![F::zero(); numel(target)];
    let t_strides = broadcast_strides(target);
    let zero = vec![0; shape.len()];
    for_each_broadcast(shape, &t_strides, &zero, |i, o, _| out[o] += x[i]);
    out
}

/// Mean over `axes` keeping them as size-1 dimensions, using exact
/// summation so the result is invariant to reordering along those axes.
pub fn mean_axes<F: Real>(x: &[F], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<F>) {
    let rank = shape.len();
    let mut perm: Vec<usize> = (0..rank).filter(|a| !axes.contains(a)).collect();
    perm.extend_from_slice(axes);
    let (_, moved) = permute(x, shape, &perm);
    let len: usize = axes.iter().map(|&a| shape[a]).product();
    let scale = F::of(len as f64);
    let mut acc = ExactAccumulator::new();
    let data = moved
        .chunks_exact(len)
        .map(|row| {
            acc.clear();
            row.iter().for_each(|&v| acc.add(v));
            acc.value() / scale
        })
        .collect();
    let out_shape = (0..rank)
        .map(|a| if axes.contains(&a) { 1 } else { shape[a] })
        .collect();
    (out_shape, data)
}
