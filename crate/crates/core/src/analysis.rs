//! Cost model, finite-difference gradient checking and modulator heatmap
//! export.
//!
//! Operation counts use one convention throughout: two per
//! multiply-accumulate, one per element for bias adds, activations,
//! element-wise products and sums, one per input element for pooling,
//! five per element for layer norm, and nothing for data movement.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};

use crate::backbone::{ModelConfig, Network};
use crate::error::{config_err, Error, Result};
use crate::focal::{FocalLayer, MixerKind};
use crate::graph::{Graph, OpKind, Var};
use crate::layers::Linear;
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;
use crate::SeededRng;

// ------------------------------------------------------------- cost model

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostEntry {
    pub layer: String,
    pub params: u64,
    pub flops: u64,
}

/// Per-layer parameter and operation counts for one input shape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    /// `[B, T, H, W, C_in]`.
    pub input: [usize; 5],
    pub entries: Vec<CostEntry>,
}

impl CostReport {
    pub fn total_params(&self) -> u64 {
        self.entries.iter().map(|e| e.params).sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.entries.iter().map(|e| e.flops).sum()
    }

    pub fn get(&self, layer: &str) -> Option<&CostEntry> {
        self.entries.iter().find(|e| e.layer == layer)
    }

    /// `layer,params,flops` rows followed by a `total` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,params,flops\n");
        for e in &self.entries {
            writeln!(s, "{},{},{}", e.layer, e.params, e.flops).unwrap();
        }
        writeln!(s, "total,{},{}", self.total_params(), self.total_flops()).unwrap();
        s
    }
}

fn linear_flops(p: u64, cin: u64, cout: u64) -> u64 {
    2 * p * cin * cout + p * cout
}

/// Closed-form cost of a network for a batch of `batch` clips of the
/// configured input size, without building anything.
pub fn analytic_cost(cfg: &ModelConfig, batch: usize) -> Result<CostReport> {
    cfg.validate()?;
    let n = &cfg.network;
    let b = batch as u64;
    let layout = cfg.layout();
    let mut entries = Vec::new();
    let mut push = |layer: String, params: usize, flops: u64| {
        entries.push(CostEntry {
            layer,
            params: params as u64,
            flops,
        })
    };
    let [t0, h0, w0] = cfg.stage_grid(0);
    let c0 = cfg.stage_dim(0);
    let p0 = b * (t0 * h0 * w0) as u64;
    let k = cfg.patch_len();
    push(
        "patch_embed".into(),
        Linear::param_count(k, c0, true) + 2 * c0,
        linear_flops(p0, k as u64, c0 as u64) + 5 * p0 * c0 as u64,
    );
    let mut global = 0;
    for s in 0..4 {
        let [t, h, w] = cfg.stage_grid(s);
        let c = cfg.stage_dim(s);
        let p = b * (t * h * w) as u64;
        let pc = p * c as u64;
        if s > 0 {
            push(
                format!("stage{s}.downsample"),
                Linear::param_count(2 * c, c, true),
                linear_flops(p, 2 * c as u64, c as u64),
            );
        }
        let hidden = cfg.mlp_hidden(c);
        for bi in 0..n.blocks_per_stage[s] {
            let name = format!("stage{s}.block{bi}");
            let kind = layout[global];
            global += 1;
            if kind != MixerKind::Identity {
                push(format!("{name}.norm1"), 2 * c, 5 * pc);
                push(
                    format!("{name}.mixer"),
                    FocalLayer::param_count(kind, c, &cfg.focal),
                    FocalLayer::flops(kind, [batch, t, h, w, c], &cfg.focal),
                );
            } else {
                push(format!("{name}.norm1"), 2 * c, 0);
            }
            push(format!("{name}.norm2"), 2 * c, 5 * pc);
            push(
                format!("{name}.mlp"),
                Linear::param_count(c, hidden, true) + Linear::param_count(hidden, c, true),
                linear_flops(p, c as u64, hidden as u64) + p * hidden as u64 + linear_flops(p, hidden as u64, c as u64),
            );
            let adds = if kind == MixerKind::Identity { 1 } else { 2 };
            push(format!("{name}.residual"), 0, adds * pc);
        }
    }
    let [t, h, w] = cfg.stage_grid(3);
    let c = cfg.stage_dim(3);
    let pc = b * (t * h * w * c) as u64;
    push("head.norm".into(), 2 * c, 5 * pc);
    push("head.pool".into(), 0, pc);
    push(
        "head.fc".into(),
        Linear::param_count(c, n.num_classes, true),
        linear_flops(b, c as u64, n.num_classes as u64),
    );
    let cin = n.in_channels;
    Ok(CostReport {
        input: [batch, n.frames, n.height, n.width, cin],
        entries,
    })
}

/// Scope a parameter belongs to, from its name.
pub fn param_scope(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    match parts.as_slice() {
        [s, "downsample", ..] => format!("{s}.downsample"),
        [s, b, layer, ..] if s.starts_with("stage") => format!("{s}.{b}.{layer}"),
        ["head", layer, ..] => format!("head.{layer}"),
        [first, ..] => first.to_string(),
        [] => String::new(),
    }
}

/// Cost measured on an instantiated network: parameters summed from the
/// store, operations enumerated from a recorded evaluation-mode forward
/// pass on a zero clip.
pub fn enumerated_cost<F: Real>(net: &Network<F>, batch: usize) -> Result<CostReport> {
    let n = &net.config().network;
    let input = [batch, n.frames, n.height, n.width, n.in_channels];
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&input));
    net.forward(&mut g, x, None)?;
    let mut params: HashMap<String, u64> = HashMap::new();
    for (_, name, value) in net.store.iter() {
        *params.entry(param_scope(name)).or_default() += value.numel() as u64;
    }
    let flops: HashMap<String, u64> = g.flops_by_scope().into_iter().map(|s| (s.scope, s.flops)).collect();
    let analytic = analytic_cost(net.config(), batch)?;
    let mut entries: Vec<CostEntry> = analytic
        .entries
        .iter()
        .map(|e| CostEntry {
            layer: e.layer.clone(),
            params: params.remove(&e.layer).unwrap_or(0),
            flops: flops.get(&e.layer).copied().unwrap_or(0),
        })
        .collect();
    // Parameters of disabled mixers and scopes unknown to the analytic
    // layout still count.
    for (layer, p) in params {
        if let Some(e) = entries.iter_mut().find(|e| e.layer == layer) {
            e.params += p;
        } else {
            entries.push(CostEntry {
                layer,
                params: p,
                flops: 0,
            });
        }
    }
    for (layer, f) in flops {
        if !entries.iter().any(|e| e.layer == layer) {
            entries.push(CostEntry {
                layer,
                params: 0,
                flops: f,
            });
        }
    }
    Ok(CostReport { input, entries })
}

/// `4 N C^2 + 4 N^2 C`: q, k, v and output projections plus scores and
/// the weighted sum, as the standard attention cost estimate states it.
pub fn self_attention_flops(tokens: u64, dim: u64) -> u64 {
    4 * tokens * dim * dim + 4 * tokens * tokens * dim
}

/// Cost of the two-stream modulation layer over `tokens` positions of a
/// single frame.
pub fn modulation_flops(tokens: u64, dim: usize, cfg: &crate::FocalConfig) -> u64 {
    FocalLayer::flops(MixerKind::SpatioTemporal, [1, 1, tokens as usize, 1, dim], cfg)
}

/// Smallest token count above which self-attention always costs more than
/// modulation at width `dim`.
///
/// Modulation cost is affine in `N` and attention cost is a quadratic with
/// positive leading term, so their difference has at most one sign change
/// from negative to positive beyond its vertex; the scan stops there.
pub fn attention_crossover(dim: usize, cfg: &crate::FocalConfig) -> u64 {
    let diff = |n: u64| self_attention_flops(n, dim as u64) as i128 - modulation_flops(n, dim, cfg) as i128;
    // Past the vertex of the quadratic the difference is increasing.
    let mut n = 1;
    while diff(n) <= 0 || diff(n + 1) <= diff(n) {
        n += 1;
    }
    while n > 1 && diff(n - 1) > 0 {
        n -= 1;
    }
    n
}

// --------------------------------------------------------------- gradcheck

/// Central-difference check of one parameter tensor.
#[derive(Clone, Debug)]
pub struct GroupCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    /// Flat index of the worst coordinate.
    pub worst: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub groups: Vec<GroupCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for g in &self.groups {
            writeln!(
                s,
                "{} {} coords={} max_rel_err={:.3e} worst={} analytic={:.6e} numeric={:.6e}",
                if g.passed { "PASS" } else { "FAIL" },
                g.name,
                g.checked,
                g.max_rel_err,
                g.worst,
                g.analytic,
                g.numeric
            )
            .unwrap();
        }
        s
    }
}

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Default magnitude floor of [`relative_error`]; below it differences are
/// measured absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Options of [`gradcheck`].
#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates sampled per parameter tensor (all if fewer).
    pub samples: usize,
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            samples: 64,
            floor: REL_ERR_FLOOR,
            seed: 0,
        }
    }
}

/// Compares the reverse-mode gradient of the scalar built by `build` with
/// central differences, for every tensor in `store`. `prepare` may adjust
/// the fresh graph (for instance to inject a fault) before `build` runs.
pub fn gradcheck<B>(
    store: &mut ParamStore<f64>,
    opts: &GradcheckOptions,
    prepare: impl Fn(&mut Graph<f64>),
    build: B,
) -> Result<GradcheckReport>
where
    B: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    prepare(&mut g);
    let loss = build(&mut g, store)?;
    let analytic = g.backward(loss)?.for_params(store);
    drop(g);
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let loss = build(&mut g, store)?;
        Ok(g.value(loss).data()[0])
    };
    let mut rng = SeededRng::seed_from_u64(opts.seed);
    let ids: Vec<_> = store.ids().collect();
    let mut groups = Vec::with_capacity(ids.len());
    for (id, grad) in ids.into_iter().zip(analytic) {
        let n = grad.numel();
        let coords: Vec<usize> = if n <= opts.samples {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, opts.samples).into_vec();
            c.sort_unstable();
            c
        };
        let mut check = GroupCheck {
            name: store.name(id).to_string(),
            checked: coords.len(),
            max_rel_err: 0.0,
            worst: 0,
            analytic: 0.0,
            numeric: 0.0,
            passed: true,
        };
        for &i in &coords {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + opts.step;
            let up = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig - opts.step;
            let down = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let a = grad.data()[i];
            let err = if numeric.is_finite() {
                relative_error(a, numeric, opts.floor)
            } else {
                f64::INFINITY
            };
            if i == coords[0] || !(err <= check.max_rel_err) {
                check.max_rel_err = err;
                check.worst = i;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        check.passed = check.max_rel_err <= opts.tolerance;
        groups.push(check);
    }
    Ok(GradcheckReport {
        step: opts.step,
        tolerance: opts.tolerance,
        groups,
    })
}

/// Fixed random projection `sum(y * R)` used to turn a tensor output into
/// a scalar whose gradient exercises every output element differently.
pub fn projection_loss(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = SeededRng::seed_from_u64(seed);
    let r = Tensor::randn(g.shape(y), 1.0, &mut rng);
    let r = g.input(r);
    let p = g.mul(y, r)?;
    g.sum(p)
}

/// Gradient check of a whole network on a random clip with a
/// cross-entropy loss.
pub fn gradcheck_network(net: &mut Network<f64>, batch: usize, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let n = net.config().network.clone();
    let mut rng = SeededRng::seed_from_u64(opts.seed ^ 0xc11f);
    let clip = Tensor::randn(&[batch, n.frames, n.height, n.width, n.in_channels], 1.0, &mut rng);
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..n.num_classes)).collect();
    let targets = crate::train::smoothed_targets::<f64>(&labels, n.num_classes, 0.1);
    let template = net.clone();
    gradcheck(
        &mut net.store,
        opts,
        |_| {},
        |g, s| {
            let mut shadow = template.clone();
            shadow.store = s.clone();
            let x = g.input(clip.clone());
            let logits = shadow.forward(g, x, None)?;
            g.softmax_cross_entropy(logits, &targets)
        },
    )
}

/// Fault injection used as a negative control: scales every gradient the
/// backward rule of `kind` emits.
pub fn with_fault(kind: OpKind, scale: f64) -> impl Fn(&mut Graph<f64>) {
    move |g| g.inject_backward_fault(kind, scale)
}

// ---------------------------------------------------------------- heatmaps

/// Per-frame channel-wise L2 magnitude of a `[1, T, H, W, C]` modulator,
/// each frame min-max normalised to `[0, 1]` (a constant frame maps to 0).
pub fn magnitude_maps<F: Real>(m: &Tensor<F>) -> Result<Vec<Vec<f64>>> {
    let s = m.shape();
    if s.len() != 5 || s[0] != 1 {
        return Err(Error::Shape(format!("expected a [1,T,H,W,C] modulator, got {s:?}")));
    }
    let (t, hw, c) = (s[1], s[2] * s[3], s[4]);
    Ok((0..t)
        .map(|f| {
            let mags: Vec<f64> = (0..hw)
                .map(|p| {
                    let px = &m.data()[(f * hw + p) * c..][..c];
                    px.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt()
                })
                .collect();
            let lo = mags.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = mags.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let range = hi - lo;
            mags.iter()
                .map(|&v| if range > 0.0 { (v - lo) / range } else { 0.0 })
                .collect()
        })
        .collect())
}

/// Binary PGM (`P5`, maxval 255) of a row-major map with values in [0,1].
pub fn pgm_bytes(map: &[f64], height: usize, width: usize) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(map.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// Writes `frameNN_spatial.pgm` and `frameNN_temporal.pgm` for every token
/// frame of the last block of `stage`, for a single clip `[1, T, H, W, C]`.
/// Returns the written paths.
pub fn export_modulator_maps<F: Real>(
    net: &Network<F>,
    clip: &Tensor<F>,
    stage: usize,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let pairs = net.capture_modulators(clip, stage)?;
    let (spatial, temporal) = pairs
        .into_iter()
        .rev()
        .find(|(s, t)| s.is_some() || t.is_some())
        .ok_or_else(|| config_err!("stage {stage} has no active modulation layer"))?;
    let reference = spatial.as_ref().or(temporal.as_ref()).unwrap();
    let s = reference.shape().to_vec();
    let (t, h, w) = (s[1], s[2], s[3]);
    let blank = vec![vec![0.0; h * w]; t];
    let sm = spatial
        .as_ref()
        .map(magnitude_maps)
        .transpose()?
        .unwrap_or_else(|| blank.clone());
    let tm = temporal.as_ref().map(magnitude_maps).transpose()?.unwrap_or(blank);
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::with_capacity(2 * t);
    for f in 0..t {
        for (tag, maps) in [("spatial", &sm), ("temporal", &tm)] {
            let path = out_dir.join(format!("frame{f:02}_{tag}.pgm"));
            fs::write(&path, pgm_bytes(&maps[f], h, w)).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
    }
    Ok(written)
}
