//! Focal modulation layers: the per-frame spatial layer, the per-location
//! temporal layer, the two-stream spatio-temporal layer and the design
//! variants built from them.
//!
//! Activations enter and leave every layer as `[B, T, H, W, C]`. The
//! spatial branch works on `[B*T, H, W, C]` frames, the temporal branch on
//! `[B*H*W, T, C]` pixel series.

use std::collections::BTreeSet;
use std::sync::Mutex;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::Linear;
use crate::params::{Init, ParamId, ParamStore};
use crate::real::Real;

/// How the spatial and temporal modulators are combined with the query.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    #[default]
    Multiply,
    Average,
    LearnedProjection,
}

/// Spatio-temporal arrangement of the modulation layers in a network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DesignVariant {
    /// Per-frame spatial modulation only; time is averaged at the head.
    #[serde(rename = "a_spatial_avg")]
    SpatialAvg,
    /// Each spatial level is a 2-D depthwise conv followed by a depthwise
    /// conv along time.
    #[serde(rename = "b_factorized_conv")]
    FactorizedConv,
    /// Spatial blocks for the first half of the network, temporal blocks
    /// after.
    #[serde(rename = "c_factorized_encoder")]
    FactorizedEncoder,
    /// Spatial and temporal blocks alternate, starting with spatial.
    #[serde(rename = "d_alternating")]
    Alternating,
    /// Parallel spatial and temporal streams in every block.
    #[default]
    #[serde(rename = "e_parallel")]
    Parallel,
}

impl DesignVariant {
    pub const ALL: [DesignVariant; 5] = [
        DesignVariant::SpatialAvg,
        DesignVariant::FactorizedConv,
        DesignVariant::FactorizedEncoder,
        DesignVariant::Alternating,
        DesignVariant::Parallel,
    ];

    /// Short label `a`..`e`.
    pub fn letter(self) -> char {
        match self {
            DesignVariant::SpatialAvg => 'a',
            DesignVariant::FactorizedConv => 'b',
            DesignVariant::FactorizedEncoder => 'c',
            DesignVariant::Alternating => 'd',
            DesignVariant::Parallel => 'e',
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DesignVariant::SpatialAvg => "a_spatial_avg",
            DesignVariant::FactorizedConv => "b_factorized_conv",
            DesignVariant::FactorizedEncoder => "c_factorized_encoder",
            DesignVariant::Alternating => "d_alternating",
            DesignVariant::Parallel => "e_parallel",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        DesignVariant::ALL
            .into_iter()
            .find(|v| v.name() == s || s.len() == 1 && s.starts_with(v.letter()))
            .ok_or_else(|| config_err!("unknown design variant '{s}'"))
    }

    /// Mixer of every block, given the total block count of the network.
    pub fn layout(self, blocks: usize) -> Vec<MixerKind> {
        (0..blocks)
            .map(|i| match self {
                DesignVariant::SpatialAvg => MixerKind::Spatial,
                DesignVariant::FactorizedConv => MixerKind::Factorized3d,
                DesignVariant::FactorizedEncoder if i < blocks.div_ceil(2) => MixerKind::Spatial,
                DesignVariant::FactorizedEncoder => MixerKind::Temporal,
                DesignVariant::Alternating if i % 2 == 0 => MixerKind::Spatial,
                DesignVariant::Alternating => MixerKind::Temporal,
                DesignVariant::Parallel => MixerKind::SpatioTemporal,
            })
            .collect()
    }
}

/// Token mixer used inside one block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MixerKind {
    Spatial,
    Factorized3d,
    Temporal,
    SpatioTemporal,
    /// No mixer: the residual branch contributes nothing.
    Identity,
}

impl MixerKind {
    pub fn has_spatial(self) -> bool {
        matches!(
            self,
            MixerKind::Spatial | MixerKind::Factorized3d | MixerKind::SpatioTemporal
        )
    }

    pub fn has_temporal(self) -> bool {
        matches!(self, MixerKind::Temporal | MixerKind::SpatioTemporal)
    }
}

/// Hyper-parameters of a focal modulation layer. Channel width is given
/// per stage by the network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FocalConfig {
    pub focal_levels: usize,
    pub base_kernel: usize,
    pub kernel_step: usize,
    pub fusion: Fusion,
    pub variant: DesignVariant,
}

impl Default for FocalConfig {
    fn default() -> Self {
        FocalConfig {
            focal_levels: 2,
            base_kernel: 3,
            kernel_step: 2,
            fusion: Fusion::Multiply,
            variant: DesignVariant::Parallel,
        }
    }
}

impl FocalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.focal_levels == 0 {
            return Err(config_err!("focal_levels must be at least 1"));
        }
        if self.base_kernel.is_multiple_of(2) {
            return Err(config_err!("base_kernel {} must be odd", self.base_kernel));
        }
        if self.kernel_step == 0 || self.kernel_step % 2 == 1 {
            return Err(config_err!(
                "kernel_step {} must be positive and even",
                self.kernel_step
            ));
        }
        Ok(())
    }

    /// Kernel size of every level, `k1, k1 + step, ...`.
    pub fn kernels(&self) -> Vec<usize> {
        (0..self.focal_levels)
            .map(|l| self.base_kernel + l * self.kernel_step)
            .collect()
    }
}

// ------------------------------------------------------------ functional

/// Warns once per kernel, extent and axis.
fn warn_large_kernels(kernels: &[usize], extent: usize, axis: &'static str) {
    static SEEN: Mutex<BTreeSet<(usize, usize, &str)>> = Mutex::new(BTreeSet::new());
    for &k in kernels {
        if k > 2 * extent + 1 && SEEN.lock().unwrap().insert((k, extent, axis)) {
            log::warn!(
                "kernel {k} exceeds 2*{axis}+1 = {}; padding absorbs the excess",
                2 * extent + 1
            );
        }
    }
}

/// Levels `Z^1..Z^{L+1}` of the spatial hierarchy for `z0: [N, H, W, C]`:
/// `Z^l = GeLU(DWConv(Z^{l-1}))` then `Z^{L+1} = GeLU(mean_{H,W} Z^L)`
/// broadcast back over the frame.
pub fn contextualize_spatial<F: Real>(g: &mut Graph<F>, z0: Var, kernels: &[Var]) -> Result<Vec<Var>> {
    let shape = g.shape(z0).to_vec();
    if shape.len() != 4 {
        return Err(shape_err!("spatial contextualisation expects [N,H,W,C], got {shape:?}"));
    }
    let sizes: Vec<usize> = kernels.iter().map(|&k| g.shape(k)[0]).collect();
    warn_large_kernels(&sizes, shape[1].min(shape[2]), "min(H,W)");
    let mut levels = Vec::with_capacity(kernels.len() + 1);
    let mut ctx = z0;
    for &k in kernels {
        let c = g.dwconv2d(ctx, k)?;
        ctx = g.gelu(c)?;
        levels.push(ctx);
    }
    let pooled = g.mean(ctx, &[1, 2])?;
    let pooled = g.gelu(pooled)?;
    levels.push(g.broadcast_to(pooled, &shape)?);
    Ok(levels)
}

/// Temporal analogue of [`contextualize_spatial`] for `z0: [N, T, C]`.
pub fn contextualize_temporal<F: Real>(g: &mut Graph<F>, z0: Var, kernels: &[Var]) -> Result<Vec<Var>> {
    let shape = g.shape(z0).to_vec();
    if shape.len() != 3 {
        return Err(shape_err!("temporal contextualisation expects [N,T,C], got {shape:?}"));
    }
    let mut levels = Vec::with_capacity(kernels.len() + 1);
    let mut ctx = z0;
    for &k in kernels {
        let c = g.dwconv1d(ctx, k)?;
        ctx = g.gelu(c)?;
        levels.push(ctx);
    }
    let pooled = g.mean(ctx, &[1])?;
    let pooled = g.gelu(pooled)?;
    levels.push(g.broadcast_to(pooled, &shape)?);
    Ok(levels)
}

/// `sum_l gates[..., l] * levels[l]`.
pub fn gated_aggregate<F: Real>(g: &mut Graph<F>, levels: &[Var], gates: Var) -> Result<Var> {
    g.gated_sum(levels, gates)
}

/// `[B, T, H, W, C]` to `[B*H*W, T, C]`.
pub fn to_series<F: Real>(g: &mut Graph<F>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let p = g.permute(x, &[0, 2, 3, 1, 4])?;
    g.reshape(p, &[s[0] * s[2] * s[3], s[1], s[4]])
}

/// Inverse of [`to_series`] for a clip of shape `dims = [B, T, H, W, C]`.
pub fn from_series<F: Real>(g: &mut Graph<F>, x: Var, dims: &[usize]) -> Result<Var> {
    let r = g.reshape(x, &[dims[0], dims[2], dims[3], dims[1], dims[4]])?;
    g.permute(r, &[0, 3, 1, 2, 4])
}

// ----------------------------------------------------------------- layer

#[derive(Clone, Debug)]
struct Branch {
    in_proj: Linear,
    kernels: Vec<ParamId>,
    time_kernels: Vec<ParamId>,
    ctx_proj: ParamId,
}

/// Modulators recorded during a forward pass, both as `[B, T, H, W, C]`.
#[derive(Clone, Copy, Debug, Default)]
pub struct Modulators {
    pub spatial: Option<Var>,
    pub temporal: Option<Var>,
}

/// One focal modulation token mixer.
#[derive(Clone, Debug)]
pub struct FocalLayer {
    kind: MixerKind,
    dim: usize,
    levels: usize,
    fusion: Fusion,
    name: String,
    q_proj: Option<Linear>,
    spatial: Option<Branch>,
    temporal: Option<Branch>,
    fuse: Option<Linear>,
    out_proj: Option<Linear>,
}

impl FocalLayer {
    /// Registers the parameters of a `kind` mixer of width `dim` under
    /// `name` in `store`.
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        kind: MixerKind,
        dim: usize,
        cfg: &FocalConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let levels = cfg.focal_levels;
        let mut layer = FocalLayer {
            kind,
            dim,
            levels,
            fusion: cfg.fusion,
            name: name.to_string(),
            q_proj: None,
            spatial: None,
            temporal: None,
            fuse: None,
            out_proj: None,
        };
        if kind == MixerKind::Identity {
            return Ok(layer);
        }
        layer.q_proj = Some(Linear::new(store, rng, &format!("{name}.q_proj"), dim, dim, true)?);
        let kernels = cfg.kernels();
        let branch = |store: &mut ParamStore<F>, rng: &mut R, tag: &str, temporal: bool| -> Result<Branch> {
            let in_proj = Linear::new(
                store,
                rng,
                &format!("{name}.{tag}_in_proj"),
                dim,
                dim + levels + 1,
                true,
            )?;
            let mut ks = Vec::new();
            let mut ts = Vec::new();
            for (l, &k) in kernels.iter().enumerate() {
                let shape: Vec<usize> = if temporal { vec![k, dim] } else { vec![k, k, dim] };
                let fan_in = shape[..shape.len() - 1].iter().product();
                ks.push(store.add(
                    format!("{name}.{tag}_hc{l}.kernel"),
                    Init::UnitVariance(fan_in).tensor(&shape, rng),
                )?);
                if kind == MixerKind::Factorized3d {
                    ts.push(store.add(
                        format!("{name}.{tag}_hc{l}.time_kernel"),
                        Init::UnitVariance(k).tensor(&[k, dim], rng),
                    )?);
                }
            }
            let ctx_proj = store.add(
                format!("{name}.{tag}_ctx_proj.weight"),
                Init::UnitVariance(dim).tensor(&[dim, dim], rng),
            )?;
            Ok(Branch {
                in_proj,
                kernels: ks,
                time_kernels: ts,
                ctx_proj,
            })
        };
        if kind.has_spatial() {
            layer.spatial = Some(branch(store, rng, "spatial", false)?);
        }
        if kind.has_temporal() {
            layer.temporal = Some(branch(store, rng, "temporal", true)?);
        }
        if kind == MixerKind::SpatioTemporal && cfg.fusion == Fusion::LearnedProjection {
            layer.fuse = Some(Linear::new(store, rng, &format!("{name}.fuse"), 2 * dim, dim, true)?);
        }
        layer.out_proj = Some(Linear::new(store, rng, &format!("{name}.out_proj"), dim, dim, true)?);
        Ok(layer)
    }

    pub fn kind(&self) -> MixerKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Replaces the mixer with an identity (zero residual contribution);
    /// its parameters stay in the store but are no longer used.
    pub fn disable(&mut self) {
        self.kind = MixerKind::Identity;
    }

    /// Id of the query projection weight, when present.
    pub fn q_weight(&self) -> Option<ParamId> {
        self.q_proj.as_ref().map(|l| l.weight)
    }

    /// Ids of the query projection (weight, bias).
    pub fn q_proj(&self) -> Option<&Linear> {
        self.q_proj.as_ref()
    }

    pub fn out_proj(&self) -> Option<&Linear> {
        self.out_proj.as_ref()
    }

    /// Input projection of the spatial (`temporal == false`) or temporal
    /// branch.
    pub fn in_proj(&self, temporal: bool) -> Option<&Linear> {
        let b = if temporal { &self.temporal } else { &self.spatial };
        b.as_ref().map(|b| &b.in_proj)
    }

    /// Context projection weight `h` of a branch.
    pub fn ctx_proj(&self, temporal: bool) -> Option<ParamId> {
        let b = if temporal { &self.temporal } else { &self.spatial };
        b.as_ref().map(|b| b.ctx_proj)
    }

    /// Mixes `x: [B, T, H, W, C]`. Returns `None` for an identity mixer.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x: Var,
        capture: Option<&mut Modulators>,
    ) -> Result<Option<Var>> {
        if self.kind == MixerKind::Identity {
            return Ok(None);
        }
        let dims = g.shape(x).to_vec();
        if dims.len() != 5 || dims[4] != self.dim {
            return Err(shape_err!(
                "{}: expected [B,T,H,W,{}] input, got {dims:?}",
                self.name,
                self.dim
            ));
        }
        let q = self.q_proj.as_ref().unwrap().forward(g, store, x)?;
        let ms = match &self.spatial {
            Some(b) => Some(self.spatial_modulator(g, store, b, x, &dims)?),
            None => None,
        };
        let mt = match &self.temporal {
            Some(b) => Some(self.temporal_modulator(g, store, b, x, &dims)?),
            None => None,
        };
        for (m, what) in [(ms, "spatial"), (mt, "temporal")] {
            if let Some(m) = m {
                if !g.value(m).all_finite() {
                    return Err(Error::Numeric(format!("non-finite {what} modulator in {}", self.name)));
                }
            }
        }
        if let Some(c) = capture {
            c.spatial = ms;
            c.temporal = mt;
        }
        let modulated = match (ms, mt) {
            (Some(m), None) | (None, Some(m)) => g.mul(q, m)?,
            (Some(s), Some(t)) => match self.fusion {
                Fusion::Multiply => {
                    let qs = g.mul(q, s)?;
                    g.mul(qs, t)?
                }
                Fusion::Average => {
                    let sum = g.add(s, t)?;
                    let avg = g.scale(sum, F::of(0.5))?;
                    g.mul(q, avg)?
                }
                Fusion::LearnedProjection => {
                    let cat = g.concat_last(s, t)?;
                    let m = self.fuse.as_ref().unwrap().forward(g, store, cat)?;
                    g.mul(q, m)?
                }
            },
            (None, None) => unreachable!("non-identity mixer without a branch"),
        };
        Ok(Some(self.out_proj.as_ref().unwrap().forward(g, store, modulated)?))
    }

    fn split<F: Real>(&self, g: &mut Graph<F>, projected: Var) -> Result<(Var, Var)> {
        let z = g.slice_last(projected, 0, self.dim)?;
        let gates = g.slice_last(projected, self.dim, self.levels + 1)?;
        Ok((z, gates))
    }

    fn spatial_modulator<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        b: &Branch,
        x: Var,
        dims: &[usize],
    ) -> Result<Var> {
        let (bt, h, w, c) = (dims[0] * dims[1], dims[2], dims[3], dims[4]);
        let frames = g.reshape(x, &[bt, h, w, c])?;
        let projected = b.in_proj.forward(g, store, frames)?;
        let (z, gates) = self.split(g, projected)?;
        let kernels: Vec<Var> = b.kernels.iter().map(|&k| g.param(store, k)).collect();
        let levels = if b.time_kernels.is_empty() {
            contextualize_spatial(g, z, &kernels)?
        } else {
            let time: Vec<Var> = b.time_kernels.iter().map(|&k| g.param(store, k)).collect();
            self.contextualize_factorized(g, z, &kernels, &time, dims)?
        };
        let agg = gated_aggregate(g, &levels, gates)?;
        let h_s = g.param(store, b.ctx_proj);
        let m = g.pointwise_conv(agg, h_s)?;
        g.reshape(m, dims)
    }

    fn temporal_modulator<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        b: &Branch,
        x: Var,
        dims: &[usize],
    ) -> Result<Var> {
        let series = to_series(g, x)?;
        let projected = b.in_proj.forward(g, store, series)?;
        let (z, gates) = self.split(g, projected)?;
        let kernels: Vec<Var> = b.kernels.iter().map(|&k| g.param(store, k)).collect();
        let levels = contextualize_temporal(g, z, &kernels)?;
        let agg = gated_aggregate(g, &levels, gates)?;
        let h_t = g.param(store, b.ctx_proj);
        let m = g.pointwise_conv(agg, h_t)?;
        from_series(g, m, dims)
    }

    /// Spatial hierarchy whose levels are a 2-D depthwise conv followed by
    /// a depthwise conv along time, then GeLU.
    fn contextualize_factorized<F: Real>(
        &self,
        g: &mut Graph<F>,
        z0: Var,
        kernels: &[Var],
        time_kernels: &[Var],
        dims: &[usize],
    ) -> Result<Vec<Var>> {
        let frame_shape = g.shape(z0).to_vec();
        let mut levels = Vec::with_capacity(kernels.len() + 1);
        let mut ctx = z0;
        for (&k, &tk) in kernels.iter().zip(time_kernels) {
            let s = g.dwconv2d(ctx, k)?;
            let clip = g.reshape(s, dims)?;
            let series = to_series(g, clip)?;
            let t = g.dwconv1d(series, tk)?;
            let back = from_series(g, t, dims)?;
            let back = g.reshape(back, &frame_shape)?;
            ctx = g.gelu(back)?;
            levels.push(ctx);
        }
        let pooled = g.mean(ctx, &[1, 2])?;
        let pooled = g.gelu(pooled)?;
        levels.push(g.broadcast_to(pooled, &frame_shape)?);
        Ok(levels)
    }

    /// Number of parameters a `kind` mixer of width `dim` registers.
    pub fn param_count(kind: MixerKind, dim: usize, cfg: &FocalConfig) -> usize {
        if kind == MixerKind::Identity {
            return 0;
        }
        let l = cfg.focal_levels;
        let branch = |temporal: bool| {
            let convs: usize = cfg
                .kernels()
                .iter()
                .map(|&k| {
                    let own = if temporal { k * dim } else { k * k * dim };
                    let time = if kind == MixerKind::Factorized3d { k * dim } else { 0 };
                    own + time
                })
                .sum();
            Linear::param_count(dim, dim + l + 1, true) + convs + dim * dim
        };
        let mut n = 2 * Linear::param_count(dim, dim, true);
        if kind.has_spatial() {
            n += branch(false);
        }
        if kind.has_temporal() {
            n += branch(true);
        }
        if kind == MixerKind::SpatioTemporal && cfg.fusion == Fusion::LearnedProjection {
            n += Linear::param_count(2 * dim, dim, true);
        }
        n
    }

    /// Operation count of one forward pass over a `[B, T, H, W, C]` clip,
    /// by the same convention as [`Graph::node_flops`].
    pub fn flops(kind: MixerKind, dims: [usize; 5], cfg: &FocalConfig) -> u64 {
        if kind == MixerKind::Identity {
            return 0;
        }
        let [b, t, h, w, c] = dims.map(|d| d as u64);
        let p = b * t * h * w;
        let pc = p * c;
        let l = cfg.focal_levels as u64;
        let linear = |cin: u64, cout: u64| 2 * p * cin * cout + p * cout;
        let branch = |temporal: bool| {
            let mut f = linear(c, c + l + 1);
            for &k in &cfg.kernels() {
                let k = k as u64;
                f += if temporal { 2 * pc * k } else { 2 * pc * k * k };
                if kind == MixerKind::Factorized3d {
                    f += 2 * pc * k;
                }
                f += pc;
            }
            // global level: mean over the pooled axes, GeLU on the result
            let pooled = if temporal { b * h * w * c } else { b * t * c };
            f += pc + pooled;
            f += 2 * (l + 1) * pc;
            f + 2 * pc * c
        };
        let mut f = 2 * linear(c, c);
        if kind.has_spatial() {
            f += branch(false);
        }
        if kind.has_temporal() {
            f += branch(true);
        }
        f += match (kind, cfg.fusion) {
            (MixerKind::SpatioTemporal, Fusion::Multiply) => 2 * pc,
            (MixerKind::SpatioTemporal, Fusion::Average) => 3 * pc,
            (MixerKind::SpatioTemporal, Fusion::LearnedProjection) => linear(2 * c, c) + pc,
            _ => pc,
        };
        f
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kernel_schedule() {
        let cfg = FocalConfig::default();
        assert_eq!(cfg.kernels(), vec![3, 5]);
        let cfg = FocalConfig {
            focal_levels: 4,
            base_kernel: 3,
            kernel_step: 4,
            ..Default::default()
        };
        assert_eq!(cfg.kernels(), vec![3, 7, 11, 15]);
    }

    #[test]
    fn config_validation() {
        for bad in [
            FocalConfig {
                focal_levels: 0,
                ..Default::default()
            },
            FocalConfig {
                base_kernel: 4,
                ..Default::default()
            },
            FocalConfig {
                kernel_step: 3,
                ..Default::default()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn variant_parsing() {
        assert_eq!(DesignVariant::parse("e").unwrap(), DesignVariant::Parallel);
        assert_eq!(
            DesignVariant::parse("a_spatial_avg").unwrap(),
            DesignVariant::SpatialAvg
        );
        assert!(matches!(DesignVariant::parse("f"), Err(Error::Config(_))));
    }

    #[test]
    fn layouts() {
        use MixerKind::*;
        assert_eq!(
            DesignVariant::FactorizedEncoder.layout(5),
            vec![Spatial, Spatial, Spatial, Temporal, Temporal]
        );
        assert_eq!(
            DesignVariant::FactorizedEncoder.layout(4),
            vec![Spatial, Spatial, Temporal, Temporal]
        );
        assert_eq!(
            DesignVariant::Alternating.layout(4),
            vec![Spatial, Temporal, Spatial, Temporal]
        );
        assert_eq!(DesignVariant::Parallel.layout(2), vec![SpatioTemporal; 2]);
    }

    #[test]
    fn param_count_matches_store() {
        let cfg = FocalConfig::default();
        for kind in [
            MixerKind::Spatial,
            MixerKind::Factorized3d,
            MixerKind::Temporal,
            MixerKind::SpatioTemporal,
            MixerKind::Identity,
        ] {
            for fusion in [Fusion::Multiply, Fusion::LearnedProjection] {
                let cfg = FocalConfig { fusion, ..cfg.clone() };
                let mut store = ParamStore::<f64>::new();
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                FocalLayer::new(&mut store, &mut rng, "m", kind, 8, &cfg).unwrap();
                assert_eq!(store.total_numel(), FocalLayer::param_count(kind, 8, &cfg), "{kind:?}");
            }
        }
    }

    #[test]
    fn output_shape_contract() {
        let cfg = FocalConfig::default();
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = FocalLayer::new(&mut store, &mut rng, "m", MixerKind::SpatioTemporal, 16, &cfg).unwrap();
        let mut g = Graph::new();
        let x = g.input(crate::Tensor::randn(&[2, 4, 8, 8, 16], 1.0, &mut rng));
        let y = layer.forward(&mut g, &store, x, None).unwrap().unwrap();
        assert_eq!(g.shape(y), &[2, 4, 8, 8, 16]);
    }
}
