//! Deliberately naive reference implementations.
//!
//! Everything here is written as direct nested loops over plain `f64`
//! slices, sharing no code with the engine, so that agreement between the
//! two is evidence rather than tautology.

use std::f64::consts::FRAC_1_SQRT_2;

/// Row-major offset of `idx` in an array of `shape`.
pub fn offset(shape: &[usize], idx: &[usize]) -> usize {
    let mut o = 0;
    for (d, i) in shape.iter().zip(idx) {
        o = o * d + i;
    }
    o
}

/// `y[p, j] = sum_i x[p, i] w[i, j] + b[j]`.
pub fn linear(x: &[f64], cin: usize, w: &[f64], cout: usize, b: Option<&[f64]>) -> Vec<f64> {
    let p = x.len() / cin;
    let mut y = vec![0.0; p * cout];
    for r in 0..p {
        for j in 0..cout {
            let mut s = match b {
                Some(b) => b[j],
                None => 0.0,
            };
            for i in 0..cin {
                s += x[r * cin + i] * w[i * cout + j];
            }
            y[r * cout + j] = s;
        }
    }
    y
}

/// Depthwise 2-D correlation, `[n, h, w, c]` input, `[k, k, c]` kernel,
/// zero padding `(k - 1) / 2`.
pub fn dwconv2d(x: &[f64], n: usize, h: usize, w: usize, c: usize, kernel: &[f64], k: usize) -> Vec<f64> {
    let r = (k / 2) as isize;
    let mut y = vec![0.0; x.len()];
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                for ch in 0..c {
                    let mut s = 0.0;
                    for di in 0..k {
                        for dj in 0..k {
                            let yi = i as isize + di as isize - r;
                            let xj = j as isize + dj as isize - r;
                            if yi < 0 || xj < 0 || yi >= h as isize || xj >= w as isize {
                                continue;
                            }
                            let v = x[offset(&[n, h, w, c], &[b, yi as usize, xj as usize, ch])];
                            s += v * kernel[offset(&[k, k, c], &[di, dj, ch])];
                        }
                    }
                    y[offset(&[n, h, w, c], &[b, i, j, ch])] = s;
                }
            }
        }
    }
    y
}

/// Depthwise 1-D correlation, `[n, t, c]` input, `[k, c]` kernel.
pub fn dwconv1d(x: &[f64], n: usize, t: usize, c: usize, kernel: &[f64], k: usize) -> Vec<f64> {
    let r = (k / 2) as isize;
    let mut y = vec![0.0; x.len()];
    for b in 0..n {
        for i in 0..t {
            for ch in 0..c {
                let mut s = 0.0;
                for d in 0..k {
                    let src = i as isize + d as isize - r;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    s += x[offset(&[n, t, c], &[b, src as usize, ch])] * kernel[d * c + ch];
                }
                y[offset(&[n, t, c], &[b, i, ch])] = s;
            }
        }
    }
    y
}

/// `out[p, ch] = sum_l gates[p, l] * levels[l][p, ch]`, summed in level
/// order from zero.
pub fn gated_sum(levels: &[Vec<f64>], gates: &[f64], c: usize) -> Vec<f64> {
    let nl = levels.len();
    let p = levels[0].len() / c;
    let mut y = vec![0.0; p * c];
    for r in 0..p {
        for ch in 0..c {
            let mut s = 0.0;
            for l in 0..nl {
                s += gates[r * nl + l] * levels[l][r * c + ch];
            }
            y[r * c + ch] = s;
        }
    }
    y
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

/// Central differences of `f` at `x` with step `h`.
pub fn finite_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            xp[i] = x[i] + h;
            let up = f(&xp);
            xp[i] = x[i] - h;
            let down = f(&xp);
            xp[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Weights of one branch of the reference modulation layer.
#[derive(Clone, Debug)]
pub struct BranchWeights {
    /// `[C, C + L + 1]` and `[C + L + 1]`.
    pub in_w: Vec<f64>,
    pub in_b: Vec<f64>,
    /// One kernel per level: `[k, k, C]` (spatial) or `[k, C]` (temporal).
    pub kernels: Vec<(usize, Vec<f64>)>,
    /// `[C, C]`, no bias.
    pub ctx_w: Vec<f64>,
}

/// Weights of the reference two-stream modulation layer.
#[derive(Clone, Debug)]
pub struct FocalWeights {
    pub c: usize,
    pub q_w: Vec<f64>,
    pub q_b: Vec<f64>,
    pub spatial: Option<BranchWeights>,
    pub temporal: Option<BranchWeights>,
    pub out_w: Vec<f64>,
    pub out_b: Vec<f64>,
}

/// Result of [`focal_modulation`]: output and the two modulators, all
/// `[B, T, H, W, C]` row-major.
pub struct FocalOutput {
    pub y: Vec<f64>,
    pub spatial: Option<Vec<f64>>,
    pub temporal: Option<Vec<f64>>,
}

/// Reference forward pass with multiplicative fusion, following the
/// layer's pseudo-code literally: the spatial branch per frame over H x W,
/// the temporal branch per pixel over T.
pub fn focal_modulation(x: &[f64], dims: [usize; 5], wts: &FocalWeights) -> FocalOutput {
    let [b, t, h, w, c] = dims;
    let q = linear(x, c, &wts.q_w, c, Some(&wts.q_b));
    let spatial = wts.spatial.as_ref().map(|br| {
        let nl = br.kernels.len();
        let proj = linear(x, c, &br.in_w, c + nl + 1, Some(&br.in_b));
        let (z, gates) = split(&proj, c, nl + 1);
        let mut levels = Vec::new();
        let mut ctx = z;
        for (k, ker) in &br.kernels {
            ctx = dwconv2d(&ctx, b * t, h, w, c, ker, *k).into_iter().map(gelu).collect();
            levels.push(ctx.clone());
        }
        let mut global = vec![0.0; ctx.len()];
        for f in 0..b * t {
            for ch in 0..c {
                let mut s = 0.0;
                for p in 0..h * w {
                    s += ctx[(f * h * w + p) * c + ch];
                }
                let g = gelu(s / (h * w) as f64);
                for p in 0..h * w {
                    global[(f * h * w + p) * c + ch] = g;
                }
            }
        }
        levels.push(global);
        let agg = gated_sum(&levels, &gates, c);
        linear(&agg, c, &br.ctx_w, c, None)
    });
    let temporal = wts.temporal.as_ref().map(|br| {
        let nl = br.kernels.len();
        // gather each pixel's series into [B*H*W, T, C]
        let mut series = vec![0.0; x.len()];
        for bi in 0..b {
            for ti in 0..t {
                for yi in 0..h {
                    for xi in 0..w {
                        for ch in 0..c {
                            let src = offset(&[b, t, h, w, c], &[bi, ti, yi, xi, ch]);
                            let dst = offset(&[b, h, w, t, c], &[bi, yi, xi, ti, ch]);
                            series[dst] = x[src];
                        }
                    }
                }
            }
        }
        let proj = linear(&series, c, &br.in_w, c + nl + 1, Some(&br.in_b));
        let (z, gates) = split(&proj, c, nl + 1);
        let mut levels = Vec::new();
        let mut ctx = z;
        for (k, ker) in &br.kernels {
            ctx = dwconv1d(&ctx, b * h * w, t, c, ker, *k).into_iter().map(gelu).collect();
            levels.push(ctx.clone());
        }
        let mut global = vec![0.0; ctx.len()];
        for s in 0..b * h * w {
            for ch in 0..c {
                let mut acc = 0.0;
                for ti in 0..t {
                    acc += ctx[(s * t + ti) * c + ch];
                }
                let g = gelu(acc / t as f64);
                for ti in 0..t {
                    global[(s * t + ti) * c + ch] = g;
                }
            }
        }
        levels.push(global);
        let agg = gated_sum(&levels, &gates, c);
        let m = linear(&agg, c, &br.ctx_w, c, None);
        let mut back = vec![0.0; m.len()];
        for bi in 0..b {
            for ti in 0..t {
                for yi in 0..h {
                    for xi in 0..w {
                        for ch in 0..c {
                            let src = offset(&[b, h, w, t, c], &[bi, yi, xi, ti, ch]);
                            let dst = offset(&[b, t, h, w, c], &[bi, ti, yi, xi, ch]);
                            back[dst] = m[src];
                        }
                    }
                }
            }
        }
        back
    });
    let mut modulated = q;
    for m in spatial.iter().chain(temporal.iter()) {
        for (v, &mv) in modulated.iter_mut().zip(m) {
            *v *= mv;
        }
    }
    FocalOutput {
        y: linear(&modulated, c, &wts.out_w, c, Some(&wts.out_b)),
        spatial,
        temporal,
    }
}

fn split(proj: &[f64], c: usize, g: usize) -> (Vec<f64>, Vec<f64>) {
    let mut z = Vec::new();
    let mut gates = Vec::new();
    for row in proj.chunks_exact(c + g) {
        z.extend_from_slice(&row[..c]);
        gates.extend_from_slice(&row[c..]);
    }
    (z, gates)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_examples() {
        assert_eq!(linear(&[1.0, 1.0], 2, &[2.0, 3.0], 1, Some(&[1.0])), vec![6.0]);
        let y = dwconv1d(&[1.0, 2.0, 3.0], 1, 3, 1, &[1.0, 1.0, 1.0], 3);
        assert_eq!(y, vec![3.0, 6.0, 5.0]);
        let y = dwconv2d(&[1.0; 16], 1, 4, 4, 1, &[1.0; 9], 3);
        assert_eq!((y[0], y[1], y[5]), (4.0, 6.0, 9.0));
    }

    #[test]
    fn finite_difference_of_square() {
        let d = finite_difference(|x| x[0] * x[0], &[3.0], 1e-3);
        assert!((d[0] - 6.0).abs() < 1e-9);
    }
}
