//! Four-stage video backbone: normalised patch or tubelet embedding, stages of
//! pre-norm blocks with patch-merging downsamplers between them, and a
//! norm / pool / linear classifier head.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::focal::{FocalConfig, FocalLayer, MixerKind, Modulators};
use crate::graph::{Graph, Var};
use crate::kernels::elementwise;
use crate::layers::{LayerNorm, Linear};
use crate::params::{Init, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::SeededRng;

/// Spatial patch side of the embedding.
pub const PATCH: usize = 4;

/// Token embedding of the input clip.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Embedding {
    /// Each frame is cut into 4x4 patches.
    #[default]
    #[serde(rename = "patch_1")]
    Patch1,
    /// Pairs of frames are cut into 2x4x4 tubelets.
    #[serde(rename = "tubelet_2")]
    Tubelet2,
}

impl Embedding {
    pub fn frames_per_token(self) -> usize {
        match self {
            Embedding::Patch1 => 1,
            Embedding::Tubelet2 => 2,
        }
    }
}

/// Network shape and input geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub embed_dim: usize,
    pub blocks_per_stage: [usize; 4],
    pub embedding: Embedding,
    pub mlp_ratio: f64,
    pub drop_path_rate: f64,
    pub num_classes: usize,
    pub in_channels: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            embed_dim: 96,
            blocks_per_stage: [2, 2, 6, 2],
            embedding: Embedding::Patch1,
            mlp_ratio: 4.0,
            drop_path_rate: 0.1,
            num_classes: 400,
            in_channels: 3,
            frames: 8,
            height: 224,
            width: 224,
        }
    }
}

/// Everything needed to instantiate a [`Network`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub network: NetworkConfig,
    pub focal: FocalConfig,
}

impl ModelConfig {
    /// Named presets: `tiny`, `T`, `S`, `B`.
    pub fn preset(name: &str) -> Result<Self> {
        let (embed_dim, blocks) = match name {
            "tiny" => (32, [1, 1, 2, 1]),
            "T" | "t" => (96, [2, 2, 6, 2]),
            "S" | "s" => (96, [2, 2, 18, 2]),
            "B" | "b" => (128, [2, 2, 18, 2]),
            _ => return Err(config_err!("unknown preset '{name}' (expected tiny, T, S or B)")),
        };
        Ok(ModelConfig {
            network: NetworkConfig {
                embed_dim,
                blocks_per_stage: blocks,
                ..Default::default()
            },
            focal: FocalConfig::default(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let n = &self.network;
        self.focal.validate()?;
        if n.embed_dim == 0 || n.num_classes == 0 || n.in_channels == 0 || n.frames == 0 {
            return Err(config_err!(
                "embed_dim, num_classes, in_channels and frames must be positive"
            ));
        }
        if n.blocks_per_stage.contains(&0) {
            return Err(config_err!("every stage needs at least one block"));
        }
        if !n.height.is_multiple_of(32) || !n.width.is_multiple_of(32) || n.height == 0 || n.width == 0 {
            return Err(config_err!(
                "input {}x{} must be a positive multiple of 32 in each dimension",
                n.height,
                n.width
            ));
        }
        if !n.frames.is_multiple_of(n.embedding.frames_per_token()) {
            return Err(config_err!(
                "tubelet embedding needs an even frame count, got {}",
                n.frames
            ));
        }
        if !(0.0..1.0).contains(&n.drop_path_rate) {
            return Err(config_err!("drop_path_rate {} outside [0, 1)", n.drop_path_rate));
        }
        if !(n.mlp_ratio > 0.0) || self.mlp_hidden(n.embed_dim) == 0 {
            return Err(config_err!("mlp_ratio {} must be positive", n.mlp_ratio));
        }
        Ok(())
    }

    pub fn total_blocks(&self) -> usize {
        self.network.blocks_per_stage.iter().sum()
    }

    /// Mixer kind of every block in network order.
    pub fn layout(&self) -> Vec<MixerKind> {
        self.focal.variant.layout(self.total_blocks())
    }

    pub fn stage_dim(&self, stage: usize) -> usize {
        self.network.embed_dim << stage
    }

    pub fn mlp_hidden(&self, dim: usize) -> usize {
        (self.network.mlp_ratio * dim as f64).round() as usize
    }

    /// Token grid `[T', H', W']` of a stage for the configured input.
    pub fn stage_grid(&self, stage: usize) -> [usize; 3] {
        let n = &self.network;
        let div = PATCH << stage;
        [n.frames / n.embedding.frames_per_token(), n.height / div, n.width / div]
    }

    /// Drop probability of block `i` out of `n`: linear from 0 to the rate.
    pub fn drop_rate(&self, i: usize) -> f64 {
        let n = self.total_blocks();
        if n <= 1 {
            0.0
        } else {
            self.network.drop_path_rate * i as f64 / (n - 1) as f64
        }
    }

    /// Flattened patch length fed to the embedding projection.
    pub fn patch_len(&self) -> usize {
        self.network.embedding.frames_per_token() * PATCH * PATCH * self.network.in_channels
    }
}

#[derive(Clone, Debug)]
struct Block {
    norm1: LayerNorm,
    mixer: FocalLayer,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    drop_rate: f64,
}

#[derive(Clone, Debug)]
struct Stage {
    downsample: Option<Linear>,
    blocks: Vec<Block>,
}

/// An instantiated backbone with its parameters.
#[derive(Clone, Debug)]
pub struct Network<F: Real> {
    config: ModelConfig,
    pub store: ParamStore<F>,
    patch_embed: Linear,
    patch_norm: LayerNorm,
    stages: Vec<Stage>,
    head_norm: LayerNorm,
    head_fc: Linear,
}

/// `[B, T, H, W, C]` to `[B, T/pt, H/p, W/p, pt*p*p*C]`, non-overlapping.
pub fn patchify<F: Real>(g: &mut Graph<F>, x: Var, pt: usize, p: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 5 {
        return Err(shape_err!("patchify expects [B,T,H,W,C], got {s:?}"));
    }
    let [b, t, h, w, c] = [s[0], s[1], s[2], s[3], s[4]];
    if t % pt != 0 || h % p != 0 || w % p != 0 {
        return Err(config_err!("clip {s:?} is not divisible into {pt}x{p}x{p} patches"));
    }
    let r = g.reshape(x, &[b, t / pt, pt, h / p, p, w / p, p, c])?;
    let r = g.permute(r, &[0, 1, 3, 5, 2, 4, 6, 7])?;
    g.reshape(r, &[b, t / pt, h / p, w / p, pt * p * p * c])
}

impl<F: Real> Network<F> {
    /// Builds a network with freshly initialised parameters drawn from a
    /// generator seeded with `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::seed_from_u64(seed);
        Self::with_rng(config, &mut rng)
    }

    pub fn with_rng<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let c0 = config.network.embed_dim;
        let patch_embed = Linear::new(&mut store, rng, "patch_embed", config.patch_len(), c0, true)?;
        // A zero bias would map flat background patches to (almost) zero
        // tokens, which the following layer norm then blows up to unit
        // scale; a random bias gives them a fixed, well-conditioned token.
        let bias = Init::FanIn(config.patch_len()).tensor(&[c0], rng);
        store.set(patch_embed.bias.expect("patch embedding has a bias"), bias)?;
        let patch_norm = LayerNorm::new(&mut store, rng, "patch_embed.norm", c0)?;
        let layout = config.layout();
        let mut stages = Vec::new();
        let mut global = 0;
        for (s, &nb) in config.network.blocks_per_stage.iter().enumerate() {
            let dim = config.stage_dim(s);
            let downsample = if s > 0 {
                Some(Linear::new(
                    &mut store,
                    rng,
                    &format!("stage{s}.downsample"),
                    2 * dim,
                    dim,
                    true,
                )?)
            } else {
                None
            };
            let mut blocks = Vec::new();
            for b in 0..nb {
                let name = format!("stage{s}.block{b}");
                let hidden = config.mlp_hidden(dim);
                blocks.push(Block {
                    norm1: LayerNorm::new(&mut store, rng, &format!("{name}.norm1"), dim)?,
                    mixer: FocalLayer::new(
                        &mut store,
                        rng,
                        &format!("{name}.mixer"),
                        layout[global],
                        dim,
                        &config.focal,
                    )?,
                    norm2: LayerNorm::new(&mut store, rng, &format!("{name}.norm2"), dim)?,
                    fc1: Linear::new(&mut store, rng, &format!("{name}.mlp.fc1"), dim, hidden, true)?,
                    fc2: Linear::new(&mut store, rng, &format!("{name}.mlp.fc2"), hidden, dim, true)?,
                    drop_rate: config.drop_rate(global),
                });
                global += 1;
            }
            stages.push(Stage { downsample, blocks });
        }
        let last = config.stage_dim(3);
        let head_norm = LayerNorm::new(&mut store, rng, "head.norm", last)?;
        let head_fc = Linear::new(&mut store, rng, "head.fc", last, config.network.num_classes, true)?;
        Ok(Network {
            config: config.clone(),
            store,
            patch_embed,
            patch_norm,
            stages,
            head_norm,
            head_fc,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Same architecture with parameters converted to another precision.
    pub fn cast<G: Real>(&self) -> Network<G> {
        Network {
            config: self.config.clone(),
            store: self.store.cast(),
            patch_embed: self.patch_embed.clone(),
            patch_norm: self.patch_norm.clone(),
            stages: self.stages.clone(),
            head_norm: self.head_norm.clone(),
            head_fc: self.head_fc.clone(),
        }
    }

    /// Mixer kinds currently in use, block by block.
    pub fn mixer_kinds(&self) -> Vec<MixerKind> {
        self.blocks().map(|b| b.mixer.kind()).collect()
    }

    fn blocks(&self) -> impl Iterator<Item = &Block> {
        self.stages.iter().flat_map(|s| s.blocks.iter())
    }

    /// Replaces every mixer of `kind` by an identity.
    pub fn disable_mixers(&mut self, kind: MixerKind) {
        for s in &mut self.stages {
            for b in &mut s.blocks {
                if b.mixer.kind() == kind {
                    b.mixer.disable();
                }
            }
        }
    }

    /// Replaces the mixer of block `index` (network order) by an identity.
    pub fn disable_block_mixer(&mut self, index: usize) -> Result<()> {
        let b = self
            .stages
            .iter_mut()
            .flat_map(|s| s.blocks.iter_mut())
            .nth(index)
            .ok_or_else(|| Error::Usage(format!("no block {index}")))?;
        b.mixer.disable();
        Ok(())
    }

    /// The mixer of block `index` in network order.
    pub fn mixer(&self, index: usize) -> Option<&FocalLayer> {
        self.blocks().nth(index).map(|b| &b.mixer)
    }

    /// Names of the MLP output projection and mixer output projection of
    /// every block; zeroing them turns each block into an identity map.
    pub fn residual_branch_outputs(&self) -> Vec<crate::ParamId> {
        let mut ids = Vec::new();
        for b in self.blocks() {
            ids.push(b.fc2.weight);
            ids.extend(b.fc2.bias);
            if let Some(o) = b.mixer.out_proj() {
                ids.push(o.weight);
                ids.extend(o.bias);
            }
        }
        ids
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let n = &self.config.network;
        let want = [n.frames, n.height, n.width, n.in_channels];
        if shape.len() != 5 || shape[1..] != want {
            return Err(shape_err!(
                "network expects [B,{},{},{},{}] clips, got {shape:?}",
                want[0],
                want[1],
                want[2],
                want[3]
            ));
        }
        Ok(())
    }

    /// Records the forward pass of `video: [B, T, H, W, C_in]` and returns
    /// the logits node `[B, num_classes]`. Drop path is active only when a
    /// generator is supplied (training mode).
    pub fn forward(&self, g: &mut Graph<F>, video: Var, rng: Option<&mut SeededRng>) -> Result<Var> {
        self.forward_impl(g, video, rng, None)
    }

    fn forward_impl(
        &self,
        g: &mut Graph<F>,
        video: Var,
        mut rng: Option<&mut SeededRng>,
        mut capture: Option<(usize, &mut Vec<Modulators>)>,
    ) -> Result<Var> {
        self.check_input(g.shape(video))?;
        let batch = g.shape(video)[0];
        let prev = g.set_scope("patch_embed");
        let pt = self.config.network.embedding.frames_per_token();
        let patches = patchify(g, video, pt, PATCH)?;
        let x = self.patch_embed.forward(g, &self.store, patches)?;
        let mut x = self.patch_norm.forward(g, &self.store, x)?;
        for (s, stage) in self.stages.iter().enumerate() {
            if let Some(ds) = &stage.downsample {
                g.set_scope(&format!("stage{s}.downsample"));
                let merged = patchify(g, x, 1, 2)?;
                x = ds.forward(g, &self.store, merged)?;
            }
            for (bi, block) in stage.blocks.iter().enumerate() {
                let name = format!("stage{s}.block{bi}");
                let cap = match capture.as_mut() {
                    Some((cs, list)) if *cs == s => {
                        list.push(Modulators::default());
                        list.last_mut()
                    }
                    _ => None,
                };
                x = self.block_forward(g, block, &name, x, batch, rng.as_deref_mut(), cap)?;
            }
        }
        g.set_scope("head.norm");
        let y = self.head_norm.forward(g, &self.store, x)?;
        g.set_scope("head.pool");
        let pooled = g.mean(y, &[1, 2, 3])?;
        let last = self.config.stage_dim(3);
        let pooled = g.reshape(pooled, &[batch, last])?;
        g.set_scope("head.fc");
        let logits = self.head_fc.forward(g, &self.store, pooled)?;
        g.set_scope(&prev);
        Ok(logits)
    }

    #[allow(clippy::too_many_arguments)]
    fn block_forward(
        &self,
        g: &mut Graph<F>,
        block: &Block,
        name: &str,
        x: Var,
        batch: usize,
        mut rng: Option<&mut SeededRng>,
        capture: Option<&mut Modulators>,
    ) -> Result<Var> {
        let mut x = x;
        if block.mixer.kind() != MixerKind::Identity {
            g.set_scope(&format!("{name}.norm1"));
            let n1 = block.norm1.forward(g, &self.store, x)?;
            g.set_scope(&format!("{name}.mixer"));
            if let Some(m) = block.mixer.forward(g, &self.store, n1, capture)? {
                g.set_scope(&format!("{name}.residual"));
                let m = self.drop_path(g, m, block.drop_rate, batch, rng.as_deref_mut())?;
                x = g.add(x, m)?;
            }
        }
        g.set_scope(&format!("{name}.norm2"));
        let n2 = block.norm2.forward(g, &self.store, x)?;
        g.set_scope(&format!("{name}.mlp"));
        let h = block.fc1.forward(g, &self.store, n2)?;
        let h = g.gelu(h)?;
        let h = block.fc2.forward(g, &self.store, h)?;
        g.set_scope(&format!("{name}.residual"));
        let h = self.drop_path(g, h, block.drop_rate, batch, rng)?;
        g.add(x, h)
    }

    fn drop_path(&self, g: &mut Graph<F>, x: Var, rate: f64, batch: usize, rng: Option<&mut SeededRng>) -> Result<Var> {
        let Some(rng) = rng else { return Ok(x) };
        if rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let mask = Tensor::from_fn(&[batch, 1, 1, 1, 1], |_| {
            if rng.random::<f64>() < keep {
                F::of(1.0 / keep)
            } else {
                F::zero()
            }
        });
        let mask = g.input(mask);
        g.mul(x, mask)
    }

    /// Evaluation-mode logits `[B, num_classes]` for a batch of clips.
    pub fn logits(&self, video: &Tensor<F>) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let x = g.input(video.clone());
        let y = self.forward(&mut g, x, None)?;
        Ok(g.value(y).clone())
    }

    /// Evaluation-mode class probabilities `[B, num_classes]`.
    pub fn probabilities(&self, video: &Tensor<F>) -> Result<Tensor<F>> {
        let logits = self.logits(video)?;
        let k = self.config.network.num_classes;
        let probs: Vec<F> = logits
            .data()
            .chunks_exact(k)
            .flat_map(|row| elementwise::softmax(row))
            .collect();
        Tensor::new(logits.shape().to_vec(), probs)
    }

    /// Softmax probabilities averaged over several views of the same
    /// clips.
    pub fn multi_view_inference(&self, views: &[Tensor<F>]) -> Result<Tensor<F>> {
        let Some(first) = views.first() else {
            return Err(Error::Usage("multi-view inference needs at least one view".into()));
        };
        let mut acc = self.probabilities(first)?;
        for v in &views[1..] {
            acc.add_assign(&self.probabilities(v)?);
        }
        let n = F::of(views.len() as f64);
        Ok(acc.map(|p| p / n))
    }

    /// Modulators of every block of `stage` in evaluation mode, as
    /// `(spatial, temporal)` pairs of `[B, T, H, W, C]` tensors.
    #[allow(clippy::type_complexity)]
    pub fn capture_modulators(
        &self,
        video: &Tensor<F>,
        stage: usize,
    ) -> Result<Vec<(Option<Tensor<F>>, Option<Tensor<F>>)>> {
        if stage >= 4 {
            return Err(config_err!("stage {stage} out of range 0..4"));
        }
        let mut g = Graph::new();
        let x = g.input(video.clone());
        let mut list = Vec::new();
        self.forward_impl(&mut g, x, None, Some((stage, &mut list)))?;
        Ok(list
            .into_iter()
            .map(|m| {
                (
                    m.spatial.map(|v| g.value(v).clone()),
                    m.temporal.map(|v| g.value(v).clone()),
                )
            })
            .collect())
    }
}
