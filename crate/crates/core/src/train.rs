//! Training recipe: learning-rate schedule, SGD with momentum, label
//! smoothing, mixup / cutmix / flip augmentation, the synthetic
//! moving-square task and the training / evaluation loops.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{ModelConfig, Network};
use crate::error::{config_err, Error, Result};
use crate::graph::Graph;
use crate::io;
use crate::kernels::elementwise::smoothed_one_hot;
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;
use crate::SeededRng;

/// Learning rates are quoted for this batch size and scaled linearly.
pub const REFERENCE_BATCH: usize = 512;

/// Arithmetic precision of a training run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub momentum: f64,
    pub label_smoothing: f64,
    pub mixup_alpha: f64,
    pub mixup_prob: f64,
    pub cutmix_prob: f64,
    pub flip_prob: f64,
    pub color_jitter_prob: f64,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.01,
            batch_size: 32,
            epochs: 20,
            warmup_epochs: 2,
            momentum: 0.9,
            label_smoothing: 0.1,
            mixup_alpha: 0.8,
            mixup_prob: 0.0,
            cutmix_prob: 0.0,
            flip_prob: 0.0,
            color_jitter_prob: 0.0,
            seed: 0,
            precision: Precision::F64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(config_err!("epochs and batch_size must be positive"));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(config_err!(
                "warmup_epochs ({}) must be smaller than epochs ({})",
                self.warmup_epochs,
                self.epochs
            ));
        }
        if !(self.base_lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(config_err!("base_lr must be >= 0 and momentum in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(config_err!("label_smoothing {} outside [0, 1)", self.label_smoothing));
        }
        for (name, p) in [
            ("mixup_prob", self.mixup_prob),
            ("cutmix_prob", self.cutmix_prob),
            ("flip_prob", self.flip_prob),
            ("color_jitter_prob", self.color_jitter_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(config_err!("{name} {p} outside [0, 1]"));
            }
        }
        if (self.mixup_prob > 0.0 || self.cutmix_prob > 0.0) && !(self.mixup_alpha > 0.0) {
            return Err(config_err!("mixup_alpha must be positive when mixing is enabled"));
        }
        Ok(())
    }

    pub fn peak_lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / REFERENCE_BATCH as f64
    }
}

/// Step-indexed schedule: linear warmup from 0, then half-cosine decay to
/// 0 at `total` steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
}

impl Schedule {
    pub fn new(cfg: &TrainConfig, steps_per_epoch: usize) -> Self {
        Schedule {
            peak: cfg.peak_lr(),
            warmup: cfg.warmup_epochs * steps_per_epoch,
            total: cfg.epochs * steps_per_epoch,
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.peak * step as f64 / self.warmup as f64;
        }
        let span = (self.total - self.warmup).max(1) as f64;
        let progress = ((step - self.warmup) as f64 / span).min(1.0);
        0.5 * self.peak * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// SGD with heavy-ball momentum: `v = mu v + g; p -= lr v`.
pub struct Sgd<F> {
    pub momentum: f64,
    velocity: Vec<Tensor<F>>,
}

impl<F: Real> Sgd<F> {
    pub fn new(store: &ParamStore<F>, momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: store.values().iter().map(|v| Tensor::zeros(v.shape())).collect(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &[Tensor<F>], lr: f64) -> Result<()> {
        if grads.len() != self.velocity.len() {
            return Err(Error::Usage(format!(
                "optimizer tracks {} tensors, got {} gradients",
                self.velocity.len(),
                grads.len()
            )));
        }
        let (mu, lr) = (F::of(self.momentum), F::of(lr));
        for ((p, v), g) in store.values_mut().iter_mut().zip(&mut self.velocity).zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::Usage(format!(
                    "gradient shape {:?} does not match parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = mu * *vv + gv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

// ------------------------------------------------------------ augmentation

/// `lam * x_i + (1 - lam) * x_j` for samples and soft targets, partner
/// `j = B - 1 - i`.
pub fn mixup<F: Real>(x: &mut Tensor<F>, targets: &mut Tensor<F>, lam: f64) {
    mix_rows(x, lam);
    mix_rows(targets, lam);
}

/// Pastes the box `[y0, y1) x [x0, x1)` of each partner clip into every
/// frame of the clip and mixes targets by the retained area. Returns the
/// label weight of the original sample.
pub fn cutmix<F: Real>(x: &mut Tensor<F>, targets: &mut Tensor<F>, rows: (usize, usize), cols: (usize, usize)) -> f64 {
    let s = x.shape().to_vec();
    let (h, w) = (s[2], s[3]);
    let area = (rows.1 - rows.0) * (cols.1 - cols.0);
    let lam = 1.0 - area as f64 / (h * w) as f64;
    let b = s[0];
    let per = x.numel() / b;
    let src = x.data().to_vec();
    let (t, c) = (s[1], s[4]);
    for i in 0..b {
        let j = b - 1 - i;
        for f in 0..t {
            for y in rows.0..rows.1 {
                for xx in cols.0..cols.1 {
                    let off = ((f * h + y) * w + xx) * c;
                    for ch in 0..c {
                        x.data_mut()[i * per + off + ch] = src[j * per + off + ch];
                    }
                }
            }
        }
    }
    mix_rows(targets, lam);
    lam
}

fn mix_rows<F: Real>(t: &mut Tensor<F>, lam: f64) {
    let b = t.shape()[0];
    let per = t.numel() / b;
    let src = t.data().to_vec();
    let (a, c) = (F::of(lam), F::of(1.0 - lam));
    for i in 0..b {
        let j = b - 1 - i;
        for k in 0..per {
            t.data_mut()[i * per + k] = a * src[i * per + k] + c * src[j * per + k];
        }
    }
}

/// Box covering a `1 - lam` fraction of an `h x w` frame, centred at a
/// random point and clipped to the frame.
pub fn cutmix_box<R: Rng + ?Sized>(h: usize, w: usize, lam: f64, rng: &mut R) -> ((usize, usize), (usize, usize)) {
    let ratio = (1.0 - lam).sqrt();
    let (ch, cw) = ((h as f64 * ratio) as usize, (w as f64 * ratio) as usize);
    let cy = rng.random_range(0..h) as isize;
    let cx = rng.random_range(0..w) as isize;
    let clip = |c: isize, half: isize, n: usize| {
        (
            (c - half).clamp(0, n as isize) as usize,
            (c + half).clamp(0, n as isize) as usize,
        )
    };
    (clip(cy, ch as isize / 2, h), clip(cx, cw as isize / 2, w))
}

/// Applies mixup and cutmix to a batch, each with its configured
/// probability. Batches of one sample are left alone.
pub fn mixup_cutmix<F: Real, R: Rng + ?Sized>(
    x: &mut Tensor<F>,
    targets: &mut Tensor<F>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<()> {
    if cfg.mixup_prob <= 0.0 && cfg.cutmix_prob <= 0.0 {
        return Ok(());
    }
    if x.shape()[0] < 2 {
        log::warn!("mixup/cutmix skipped: batch of one sample");
        return Ok(());
    }
    let beta =
        Beta::new(cfg.mixup_alpha, cfg.mixup_alpha).map_err(|e| config_err!("mixup_alpha {}: {e}", cfg.mixup_alpha))?;
    if rng.random::<f64>() < cfg.mixup_prob {
        let lam = beta.sample(rng);
        mixup(x, targets, lam);
    }
    if rng.random::<f64>() < cfg.cutmix_prob {
        let lam = beta.sample(rng);
        let (h, w) = (x.shape()[2], x.shape()[3]);
        let (rows, cols) = cutmix_box(h, w, lam, rng);
        cutmix(x, targets, rows, cols);
    }
    Ok(())
}

/// Mirrors one clip `[T, H, W, C]` left to right in place.
pub fn flip_clip<F: Real>(clip: &mut [F], dims: [usize; 4]) {
    let [t, h, w, c] = dims;
    for f in 0..t {
        for y in 0..h {
            let row = &mut clip[(f * h + y) * w * c..][..w * c];
            for x in 0..w / 2 {
                for ch in 0..c {
                    row.swap(x * c + ch, (w - 1 - x) * c + ch);
                }
            }
        }
    }
}

// ----------------------------------------------------------------- task

pub const CLASS_NAMES: [&str; 4] = ["left", "right", "up", "down"];

/// Four-way motion-direction task: a bright square slides across a dark
/// frame. Every frame taken alone is consistent with several classes; only
/// the order of frames reveals the direction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTask {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub object_size: usize,
    pub speed: usize,
    pub intensity: f64,
    pub noise_std: f64,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        SyntheticTask {
            frames: 8,
            height: 32,
            width: 32,
            object_size: 6,
            speed: 2,
            intensity: 1.0,
            noise_std: 0.05,
            train_size: 2000,
            test_size: 500,
            seed: 1234,
        }
    }
}

impl SyntheticTask {
    pub const CLASSES: usize = 4;

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.object_size == 0 || self.speed == 0 {
            return Err(config_err!("frames, object_size and speed must be positive"));
        }
        let travel = self.speed * (self.frames - 1) + self.object_size;
        if travel > self.height.min(self.width) {
            return Err(config_err!(
                "motion does not fit: speed*(T-1) + size = {travel} exceeds min(H,W) = {}",
                self.height.min(self.width)
            ));
        }
        if !(self.noise_std >= 0.0) {
            return Err(config_err!("noise_std must be non-negative"));
        }
        Ok(())
    }

    /// Label of the horizontally mirrored clip.
    pub fn flip_label(class: usize) -> usize {
        match class {
            0 => 1,
            1 => 0,
            c => c,
        }
    }

    /// Label of the time-reversed clip.
    pub fn reverse_label(class: usize) -> usize {
        class ^ 1
    }

    /// Top-left corner of the square in every frame.
    pub fn trajectory<R: Rng + ?Sized>(&self, class: usize, rng: &mut R) -> Vec<(usize, usize)> {
        let travel = self.speed * (self.frames - 1);
        let free_h = self.height - self.object_size;
        let free_w = self.width - self.object_size;
        let (dy, dx): (isize, isize) = match class {
            0 => (0, -1),
            1 => (0, 1),
            2 => (-1, 0),
            _ => (1, 0),
        };
        let start = |d: isize, free: usize, rng: &mut R| match d {
            -1 => rng.random_range(travel..=free),
            1 => rng.random_range(0..=free - travel),
            _ => rng.random_range(0..=free),
        };
        let y0 = start(dy, free_h, rng) as isize;
        let x0 = start(dx, free_w, rng) as isize;
        let v = self.speed as isize;
        (0..self.frames as isize)
            .map(|t| ((y0 + dy * v * t) as usize, (x0 + dx * v * t) as usize))
            .collect()
    }

    /// One `[T, H, W, 1]` clip of `class`.
    pub fn generate_clip<F: Real, R: Rng + ?Sized>(&self, class: usize, rng: &mut R) -> Result<Tensor<F>> {
        self.validate()?;
        if class >= Self::CLASSES {
            return Err(config_err!("class {class} out of range"));
        }
        let path = self.trajectory(class, rng);
        let (h, w, s) = (self.height, self.width, self.object_size);
        let mut data = vec![F::zero(); self.frames * h * w];
        for (t, &(y0, x0)) in path.iter().enumerate() {
            for y in y0..y0 + s {
                for x in x0..x0 + s {
                    data[(t * h + y) * w + x] = F::of(self.intensity);
                }
            }
        }
        if self.noise_std > 0.0 {
            let normal = Normal::new(0.0, self.noise_std).unwrap();
            for v in &mut data {
                *v += F::of(normal.sample(rng));
            }
        }
        Tensor::new(vec![self.frames, h, w, 1], data)
    }

    /// `n` clips with classes cycling through all four directions.
    pub fn dataset<F: Real>(&self, n: usize, seed: u64) -> Result<Dataset<F>> {
        let mut rng = SeededRng::seed_from_u64(seed);
        let mut clips = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % Self::CLASSES;
            clips.push(self.generate_clip(class, &mut rng)?);
            labels.push(class);
        }
        Dataset::new(clips, labels)
    }

    /// The train and test sets, from independent streams of the task seed.
    pub fn splits<F: Real>(&self) -> Result<(Dataset<F>, Dataset<F>)> {
        Ok((
            self.dataset(self.train_size, self.seed)?,
            self.dataset(self.test_size, self.seed ^ 0x5eed_7e57)?,
        ))
    }
}

/// Labelled clips of identical shape `[T, H, W, C]`.
#[derive(Clone, Debug)]
pub struct Dataset<F> {
    clips: Vec<Tensor<F>>,
    labels: Vec<usize>,
}

impl<F: Real> Dataset<F> {
    pub fn new(clips: Vec<Tensor<F>>, labels: Vec<usize>) -> Result<Self> {
        if clips.len() != labels.len() || clips.is_empty() {
            return Err(Error::Usage(format!(
                "dataset needs matching non-empty clips and labels ({} vs {})",
                clips.len(),
                labels.len()
            )));
        }
        let shape = clips[0].shape();
        if shape.len() != 4 || clips.iter().any(|c| c.shape() != shape) {
            return Err(Error::Shape("dataset clips must all share one [T,H,W,C] shape".into()));
        }
        Ok(Dataset { clips, labels })
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn clip(&self, i: usize) -> &Tensor<F> {
        &self.clips[i]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn clip_shape(&self) -> &[usize] {
        self.clips[0].shape()
    }

    /// Stacks the clips at `idx` into `[B, T, H, W, C]`.
    pub fn batch(&self, idx: &[usize]) -> Tensor<F> {
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(self.clip_shape());
        let mut data = Vec::with_capacity(idx.len() * self.clips[0].numel());
        for &i in idx {
            data.extend_from_slice(self.clips[i].data());
        }
        Tensor::new(shape, data).expect("clips share a shape")
    }

    /// Writes `clips.tensor` (`[N, T, H, W, C]`) and `labels.tensor`
    /// (`[N]`) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let all: Vec<usize> = (0..self.len()).collect();
        io::write_tensor(&dir.join("clips.tensor"), &self.batch(&all))?;
        let labels = Tensor::new(vec![self.len()], self.labels.iter().map(|&l| F::of(l as f64)).collect())?;
        io::write_tensor(&dir.join("labels.tensor"), &labels)
    }

    /// Reads a dataset written by [`Dataset::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let clips_path = dir.join("clips.tensor");
        let labels_path = dir.join("labels.tensor");
        let all: Tensor<F> = io::read_tensor(&clips_path)?;
        let labels: Tensor<F> = io::read_tensor(&labels_path)?;
        let s = all.shape().to_vec();
        if s.len() != 5 || labels.shape() != [s[0]] {
            return Err(Error::format(
                &clips_path,
                format!(
                    "expected [N,T,H,W,C] clips and [N] labels, got {s:?} and {:?}",
                    labels.shape()
                ),
            ));
        }
        let per = all.numel() / s[0];
        let clips = all
            .data()
            .chunks_exact(per)
            .map(|c| Tensor::new(s[1..].to_vec(), c.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let labels = labels
            .data()
            .iter()
            .map(|&v| {
                let f = v.f64();
                if f >= 0.0 && f.fract() == 0.0 {
                    Ok(f as usize)
                } else {
                    Err(Error::format(&labels_path, format!("label {f} is not a class index")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(clips, labels)
    }
}

// ------------------------------------------------------------- training

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub acc: f64,
    pub lr: f64,
}

impl fmt::Display for EpochMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch {} loss {:.6} acc {:.4} lr {:.6e}",
            self.epoch, self.loss, self.acc, self.lr
        )
    }
}

/// Label-smoothed targets `[B, K]` for `labels`.
pub fn smoothed_targets<F: Real>(labels: &[usize], k: usize, eps: f64) -> Tensor<F> {
    let data = labels.iter().flat_map(|&l| smoothed_one_hot(l, k, eps)).collect();
    Tensor::new(vec![labels.len(), k], data).expect("labels are non-empty")
}

/// Optional hooks into [`train`].
#[derive(Default)]
pub struct TrainHooks<'a> {
    /// Metrics log written line by line as epochs finish.
    pub metrics_log: Option<&'a Path>,
    /// Remap of labels under a horizontal flip; `None` keeps labels.
    pub flip_label: Option<fn(usize) -> usize>,
    /// Called after every epoch.
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochMetrics)>,
}

/// Result of a training run.
pub struct TrainOutcome<F: Real> {
    pub network: Network<F>,
    pub metrics: Vec<EpochMetrics>,
}

/// Trains a freshly initialised network on `train_set` and evaluates it on
/// `eval_set` after every epoch. Everything random derives from
/// `cfg.seed`.
pub fn train<F: Real>(
    model: &ModelConfig,
    cfg: &TrainConfig,
    train_set: &Dataset<F>,
    eval_set: &Dataset<F>,
    hooks: TrainHooks<'_>,
) -> Result<TrainOutcome<F>> {
    cfg.validate()?;
    model.validate()?;
    let network = Network::<F>::new(model, cfg.seed)?;
    train_network(network, cfg, train_set, eval_set, hooks)
}

/// Like [`train`] but starting from an existing network.
pub fn train_network<F: Real>(
    mut network: Network<F>,
    cfg: &TrainConfig,
    train_set: &Dataset<F>,
    eval_set: &Dataset<F>,
    mut hooks: TrainHooks<'_>,
) -> Result<TrainOutcome<F>> {
    cfg.validate()?;
    let k = network.config().network.num_classes;
    if let Some(&bad) = train_set.labels.iter().chain(&eval_set.labels).find(|&&l| l >= k) {
        return Err(config_err!("label {bad} out of range for {k} classes"));
    }
    let mut rng = SeededRng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let schedule = Schedule::new(cfg, steps_per_epoch);
    let mut sgd = Sgd::new(&network.store, cfg.momentum);
    let mut log_file = match hooks.metrics_log {
        Some(p) => Some(fs::File::create(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            lr = schedule.lr_at(step);
            let (mut x, labels) = augment_batch(train_set, idx, cfg, hooks.flip_label, &mut rng);
            let mut targets = smoothed_targets::<F>(&labels, k, cfg.label_smoothing);
            mixup_cutmix(&mut x, &mut targets, cfg, &mut rng)?;
            let at = |e: Error| match e {
                Error::Numeric(msg) => {
                    Error::Numeric(format!("{msg} at epoch {epoch}, step {bi} (global step {step})"))
                }
                other => other,
            };
            let mut g = Graph::new();
            let input = g.input(x);
            let logits = network.forward(&mut g, input, Some(&mut rng)).map_err(at)?;
            let loss = g.softmax_cross_entropy(logits, &targets).map_err(at)?;
            let value = g.value(loss).data()[0].f64();
            if !value.is_finite() {
                return Err(at(Error::Numeric(format!("non-finite loss {value}"))));
            }
            loss_sum += value * idx.len() as f64;
            let grads = g.backward(loss).map_err(at)?.for_params(&network.store);
            drop(g);
            sgd.step(&mut network.store, &grads, lr)?;
            step += 1;
        }
        let acc = evaluate(&network, eval_set, cfg.batch_size)?;
        let m = EpochMetrics {
            epoch,
            loss: loss_sum / train_set.len() as f64,
            acc,
            lr,
        };
        log::info!("{m}");
        if let (Some(f), Some(p)) = (log_file.as_mut(), hooks.metrics_log) {
            writeln!(f, "{m}").map_err(|e| Error::io(p, e))?;
        }
        if let Some(cb) = hooks.on_epoch.as_mut() {
            cb(&m);
        }
        metrics.push(m);
    }
    Ok(TrainOutcome { network, metrics })
}

fn augment_batch<F: Real>(
    data: &Dataset<F>,
    idx: &[usize],
    cfg: &TrainConfig,
    flip_label: Option<fn(usize) -> usize>,
    rng: &mut SeededRng,
) -> (Tensor<F>, Vec<usize>) {
    let mut x = data.batch(idx);
    let mut labels: Vec<usize> = idx.iter().map(|&i| data.label(i)).collect();
    if cfg.flip_prob <= 0.0 && cfg.color_jitter_prob <= 0.0 {
        return (x, labels);
    }
    let s = data.clip_shape();
    let dims = [s[0], s[1], s[2], s[3]];
    let per = data.clip(0).numel();
    for (i, label) in labels.iter_mut().enumerate() {
        let clip = &mut x.data_mut()[i * per..][..per];
        if cfg.flip_prob > 0.0 && rng.random::<f64>() < cfg.flip_prob {
            flip_clip(clip, dims);
            if let Some(f) = flip_label {
                *label = f(*label);
            }
        }
        if cfg.color_jitter_prob > 0.0 && rng.random::<f64>() < cfg.color_jitter_prob {
            let gain = F::of(rng.random_range(0.6..1.4));
            clip.iter_mut().for_each(|v| *v *= gain);
        }
    }
    (x, labels)
}

/// Index of the largest entry of each row of `[B, K]` scores.
pub fn argmax_rows<F: Real>(scores: &Tensor<F>) -> Vec<usize> {
    let k = scores.shape()[1];
    scores
        .data()
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Top-1 accuracy of `net` in evaluation mode.
pub fn evaluate<F: Real>(net: &Network<F>, data: &Dataset<F>, batch_size: usize) -> Result<f64> {
    let all: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0;
    for idx in all.chunks(batch_size.max(1)) {
        let logits = net.logits(&data.batch(idx))?;
        correct += argmax_rows(&logits)
            .iter()
            .zip(idx)
            .filter(|(&p, &i)| p == data.label(i))
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}
