use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use stfocal::analysis::{self, CostReport, GradcheckOptions, GradcheckReport};
use stfocal::io;
use stfocal::train::{self, Dataset, EpochMetrics, Precision, SyntheticTask, TrainHooks};
use stfocal::{DesignVariant, Error, ModelConfig, Network, Real, Result, Tensor};

use crate::config::ExperimentConfig;

pub const METRICS_LOG: &str = "metrics.log";
pub const CHECKPOINT: &str = "model.ckpt";
pub const FLOPS_CSV: &str = "flops.csv";
pub const DESIGNS_CSV: &str = "designs.csv";

/// Outcome of one training run.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub metrics: Vec<EpochMetrics>,
    pub params: u64,
    /// Operations for one clip.
    pub flops: u64,
    pub out_dir: PathBuf,
}

impl RunSummary {
    pub fn final_accuracy(&self) -> f64 {
        self.metrics.last().map_or(0.0, |m| m.acc)
    }
}

/// Train and test sets: the on-disk dataset when configured, the
/// synthetic task otherwise.
pub fn datasets<F: Real>(cfg: &ExperimentConfig) -> Result<(Dataset<F>, Dataset<F>)> {
    match &cfg.data.dir {
        Some(dir) => Ok((Dataset::load(&dir.join("train"))?, Dataset::load(&dir.join("test"))?)),
        None => cfg.task.splits(),
    }
}

/// `train`: echoes the config, trains, writes the metrics log and the
/// final checkpoint into `out`.
pub fn run_training(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    cfg.echo(out)?;
    match cfg.train.precision {
        Precision::F32 => train_as::<f32>(cfg, out, METRICS_LOG, Some(CHECKPOINT)),
        Precision::F64 => train_as::<f64>(cfg, out, METRICS_LOG, Some(CHECKPOINT)),
    }
}

fn train_as<F: Real>(cfg: &ExperimentConfig, out: &Path, log_name: &str, ckpt: Option<&str>) -> Result<RunSummary> {
    let (train_set, test_set) = datasets::<F>(cfg)?;
    let log_path = out.join(log_name);
    let model = cfg.model();
    let flip = cfg
        .data
        .dir
        .is_none()
        .then_some(SyntheticTask::flip_label as fn(usize) -> usize);
    let outcome = train::train(
        &model,
        &cfg.train,
        &train_set,
        &test_set,
        TrainHooks {
            metrics_log: Some(&log_path),
            flip_label: flip,
            on_epoch: None,
        },
    )?;
    if let Some(name) = ckpt {
        io::save_checkpoint(&out.join(name), &outcome.network)?;
    }
    let cost = analysis::analytic_cost(&model, 1)?;
    Ok(RunSummary {
        metrics: outcome.metrics,
        params: cost.total_params(),
        flops: cost.total_flops(),
        out_dir: out.to_path_buf(),
    })
}

/// Evaluation views of one `[T', H', W', C]` clip for a network expecting
/// `[T, H, W, C]`: `temporal` windows spread evenly over the frames times
/// `spatial` crops (1 = centre, 3 = both ends and centre of the longer
/// side). Views are returned as `[1, T, H, W, C]` tensors.
pub fn clip_views<F: Real>(
    clip: &Tensor<F>,
    model: &ModelConfig,
    temporal: usize,
    spatial: usize,
) -> Result<Vec<Tensor<F>>> {
    let s = clip.shape();
    let n = &model.network;
    if s.len() != 4 || s[3] != n.in_channels || s[0] < n.frames || s[1] < n.height || s[2] < n.width {
        return Err(Error::Shape(format!(
            "clip {s:?} is smaller than the network input [{}, {}, {}, {}]",
            n.frames, n.height, n.width, n.in_channels
        )));
    }
    if temporal == 0 || !matches!(spatial, 1 | 3) {
        return Err(Error::Usage("views must be positive and crops 1 or 3".into()));
    }
    let spread = |count: usize, room: usize| -> Vec<usize> {
        if count == 1 {
            vec![room / 2]
        } else {
            (0..count).map(|i| i * room / (count - 1)).collect()
        }
    };
    let starts_t = spread(temporal, s[0] - n.frames);
    let (room_h, room_w) = (s[1] - n.height, s[2] - n.width);
    let crops: Vec<(usize, usize)> = if spatial == 1 {
        vec![(room_h / 2, room_w / 2)]
    } else if room_w >= room_h {
        spread(3, room_w).into_iter().map(|x| (room_h / 2, x)).collect()
    } else {
        spread(3, room_h).into_iter().map(|y| (y, room_w / 2)).collect()
    };
    let c = s[3];
    let mut views = Vec::with_capacity(starts_t.len() * crops.len());
    for &t0 in &starts_t {
        for &(y0, x0) in &crops {
            let shape = [1, n.frames, n.height, n.width, c];
            views.push(Tensor::from_fn(&shape, |i| {
                let (x, ch) = ((i / c) % n.width, i % c);
                let y = (i / (c * n.width)) % n.height;
                let t = i / (c * n.width * n.height);
                clip.at(&[t0 + t, y0 + y, x0 + x, ch])
            }));
        }
    }
    Ok(views)
}

/// `eval`: top-1 accuracy of a checkpoint on `data`, averaging softmax
/// scores over `temporal x spatial` views per clip.
pub fn evaluate_checkpoint(ckpt: &Path, data: &Dataset<f64>, temporal: usize, spatial: usize) -> Result<f64> {
    let net: Network<f64> = io::load_checkpoint(ckpt)?;
    let mut correct = 0;
    for i in 0..data.len() {
        let views = clip_views(data.clip(i), net.config(), temporal, spatial)?;
        let probs = net.multi_view_inference(&views)?;
        if train::argmax_rows(&probs)[0] == data.label(i) {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

/// `flops` without a config: one row per named preset at `input`.
pub fn preset_table(input: [usize; 4]) -> Result<String> {
    let mut s = String::from("model,params,flops\n");
    for name in ["T", "S", "B"] {
        let mut m = ModelConfig::preset(name)?;
        [
            m.network.frames,
            m.network.height,
            m.network.width,
            m.network.in_channels,
        ] = input;
        let r = analysis::analytic_cost(&m, 1)?;
        writeln!(s, "{name},{},{}", r.total_params(), r.total_flops()).unwrap();
    }
    Ok(s)
}

/// `flops` with a config: the per-layer report for one clip, optionally
/// at a different `[T, H, W, C]` input.
pub fn cost_report(cfg: &ExperimentConfig, input: Option<[usize; 4]>) -> Result<CostReport> {
    let mut m = cfg.model();
    if let Some(shape) = input {
        [
            m.network.frames,
            m.network.height,
            m.network.width,
            m.network.in_channels,
        ] = shape;
    }
    analysis::analytic_cost(&m, 1)
}

/// `gradcheck`: finite-difference check of the configured network in
/// double precision on one random clip.
pub fn check_gradients(cfg: &ExperimentConfig, samples: usize) -> Result<GradcheckReport> {
    let mut model = cfg.model();
    model.network.drop_path_rate = 0.0;
    let mut net = Network::<f64>::new(&model, cfg.train.seed)?;
    let opts = GradcheckOptions {
        samples,
        seed: cfg.train.seed,
        ..Default::default()
    };
    analysis::gradcheck_network(&mut net, 1, &opts)
}

/// Clip for `visualize`: a tensor file (`[T,H,W,C]` or `[1,T,H,W,C]`) or a
/// synthetic clip of `class`.
pub fn visualization_clip(cfg: &ExperimentConfig, clip: Option<&Path>, class: usize) -> Result<Tensor<f64>> {
    let t = match clip {
        Some(path) => io::read_tensor::<f64>(path)?,
        None => {
            use rand::SeedableRng;
            let mut rng = stfocal::SeededRng::seed_from_u64(cfg.task.seed);
            cfg.task.generate_clip(class, &mut rng)?
        }
    };
    let s = t.shape().to_vec();
    match s.len() {
        4 => t.reshape(&[1, s[0], s[1], s[2], s[3]]),
        5 if s[0] == 1 => Ok(t),
        _ => Err(Error::Shape(format!("expected a [T,H,W,C] clip, got {s:?}"))),
    }
}

/// `visualize`: modulator magnitude maps of `stage` for one clip.
pub fn visualize(ckpt: &Path, clip: &Tensor<f64>, stage: usize, out: &Path) -> Result<Vec<PathBuf>> {
    let net: Network<f64> = io::load_checkpoint(ckpt)?;
    analysis::export_modulator_maps(&net, clip, stage, out)
}

/// One row of the design comparison.
#[derive(Clone, Debug)]
pub struct DesignRow {
    pub variant: DesignVariant,
    pub params: u64,
    pub flops: u64,
    pub top1: f64,
}

/// `compare-designs`: trains every design variant with the same seed and
/// budget and writes `designs.csv` plus one metrics log per variant.
pub fn compare_designs(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<DesignRow>> {
    cfg.validate()?;
    cfg.echo(out)?;
    let mut rows = Vec::new();
    for variant in DesignVariant::ALL {
        let mut c = cfg.clone();
        c.focal.variant = variant;
        let log = format!("metrics_{}.log", variant.name());
        let run = match c.train.precision {
            Precision::F32 => train_as::<f32>(&c, out, &log, None)?,
            Precision::F64 => train_as::<f64>(&c, out, &log, None)?,
        };
        log::info!("design {} top-1 {:.4}", variant.name(), run.final_accuracy());
        rows.push(DesignRow {
            variant,
            params: run.params,
            flops: run.flops,
            top1: run.final_accuracy(),
        });
    }
    let path = out.join(DESIGNS_CSV);
    fs::write(&path, designs_csv(&rows)).map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

pub fn designs_csv(rows: &[DesignRow]) -> String {
    let mut s = String::from("variant,params,flops,top1\n");
    for r in rows {
        writeln!(s, "{},{},{},{:.4}", r.variant.name(), r.params, r.flops, r.top1).unwrap();
    }
    s
}
