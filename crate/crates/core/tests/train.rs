//! Optimiser, schedule, augmentation, synthetic task and training loop.

use rand::SeedableRng;
use stfocal::train::*;
use stfocal::{DesignVariant, Error, Graph, ModelConfig, Network, ParamStore, SeededRng, Tensor};

fn schedule(epochs: usize, warmup: usize, steps: usize) -> Schedule {
    let cfg = TrainConfig {
        epochs,
        warmup_epochs: warmup,
        base_lr: 0.1,
        batch_size: 64,
        ..Default::default()
    };
    Schedule::new(&cfg, steps)
}

#[test]
fn schedule_endpoints_and_midpoint() {
    let s = schedule(10, 2, 5);
    let peak = 0.1 * 64.0 / 512.0;
    assert_eq!(s.lr_at(0), 0.0);
    assert!((s.lr_at(5) - peak / 2.0).abs() <= 1e-15);
    assert!((s.lr_at(10) - peak).abs() <= 1e-15);
    assert!(s.lr_at(50).abs() <= 1e-12);
    // cosine phase spans steps 10..50, midpoint at 30
    assert!((s.lr_at(30) - peak / 2.0).abs() <= 1e-15);
}

#[test]
fn schedule_is_continuous_at_the_junction() {
    let s = schedule(20, 3, 1000);
    let before = s.peak * (s.warmup as f64 - 1e-9) / s.warmup as f64;
    assert!((s.lr_at(s.warmup) - before).abs() <= 1e-12);
    for step in 1..s.total {
        assert!((s.lr_at(step) - s.lr_at(step - 1)).abs() <= s.peak / s.warmup as f64 + 1e-15);
    }
}

#[test]
fn warmup_must_be_shorter_than_training() {
    let cfg = TrainConfig {
        epochs: 2,
        warmup_epochs: 2,
        ..Default::default()
    };
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
}

fn scalar_store(v: f64) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.add("p", Tensor::new(vec![1], vec![v]).unwrap()).unwrap();
    s
}

#[test]
fn sgd_without_momentum_is_gradient_descent() {
    let mut store = scalar_store(1.0);
    let mut sgd = Sgd::new(&store, 0.0);
    sgd.step(&mut store, &[Tensor::new(vec![1], vec![0.5]).unwrap()], 0.1)
        .unwrap();
    assert_eq!(store.values()[0].data()[0], 1.0 - 0.05);
}

#[test]
fn sgd_descends_a_quadratic() {
    // f(p) = p^2, g = 2p; with mu = 0.9, lr = 0.1 from p = 1:
    // v1 = 2, p1 = 0.8; v2 = 0.9*2 + 1.6 = 3.4, p2 = 0.8 - 0.34 = 0.46
    let mut store = scalar_store(1.0);
    let mut sgd = Sgd::new(&store, 0.9);
    let mut f = vec![1.0];
    for _ in 0..2 {
        let p = store.values()[0].data()[0];
        sgd.step(&mut store, &[Tensor::new(vec![1], vec![2.0 * p]).unwrap()], 0.1)
            .unwrap();
        let p = store.values()[0].data()[0];
        f.push(p * p);
    }
    assert!((store.values()[0].data()[0] - 0.46).abs() < 1e-15);
    assert!(f[1] < f[0] && f[2] < f[1]);
}

#[test]
fn zero_gradient_from_rest_changes_nothing() {
    let mut store = scalar_store(3.0);
    let mut sgd = Sgd::new(&store, 0.9);
    sgd.step(&mut store, &[Tensor::zeros(&[1])], 1.0).unwrap();
    assert_eq!(store.values()[0].data()[0], 3.0);
    assert!(matches!(sgd.step(&mut store, &[], 1.0), Err(Error::Usage(_))));
}

fn two_sample_batch() -> (Tensor<f64>, Tensor<f64>) {
    let x = Tensor::from_fn(&[2, 2, 4, 4, 1], |i| if i < 32 { 1.0 } else { 3.0 });
    (x, smoothed_targets(&[0, 2], 3, 0.0))
}

#[test]
fn mixup_extremes() {
    let (x0, t0) = two_sample_batch();
    let (mut x, mut t) = (x0.clone(), t0.clone());
    mixup(&mut x, &mut t, 1.0);
    assert_eq!((x.clone(), t.clone()), (x0.clone(), t0.clone()));
    mixup(&mut x, &mut t, 0.5);
    assert!(x.data().iter().all(|&v| v == 2.0));
    assert_eq!(t.data(), &[0.5, 0.0, 0.5, 0.5, 0.0, 0.5]);
}

#[test]
fn cutmix_label_weight_is_retained_area() {
    let (mut x, mut t) = two_sample_batch();
    let lam = cutmix(&mut x, &mut t, (1, 3), (0, 2));
    assert_eq!(lam, 1.0 - 4.0 / 16.0);
    assert_eq!(t.data()[0], lam);
    assert_eq!(t.data()[2], 1.0 - lam);
    let pasted = x.data()[..32].iter().filter(|&&v| v == 3.0).count();
    assert_eq!(pasted as f64 / 32.0, 1.0 - lam);
}

#[test]
fn cutmix_box_area_tracks_lambda() {
    let mut rng = SeededRng::seed_from_u64(3);
    for _ in 0..50 {
        let ((r0, r1), (c0, c1)) = cutmix_box(32, 32, 0.75, &mut rng);
        assert!(r1 <= 32 && c1 <= 32 && r0 <= r1 && c0 <= c1);
        assert!((r1 - r0) * (c1 - c0) <= 16 * 16);
    }
}

#[test]
fn single_sample_batches_are_not_mixed() {
    let cfg = TrainConfig {
        mixup_prob: 1.0,
        cutmix_prob: 1.0,
        ..Default::default()
    };
    let mut x = Tensor::<f64>::ones(&[1, 1, 2, 2, 1]);
    let mut t = smoothed_targets(&[1], 2, 0.0);
    mixup_cutmix(&mut x, &mut t, &cfg, &mut SeededRng::seed_from_u64(0)).unwrap();
    assert_eq!(t.data(), &[0.0, 1.0]);
}

#[test]
fn smoothed_targets_sum_to_one() {
    let t = smoothed_targets::<f64>(&[0, 3, 2], 4, 0.1);
    for row in t.data().chunks_exact(4) {
        assert_eq!(row.iter().sum::<f64>(), 1.0);
    }
    assert_eq!(t.data()[0], 0.9);
    assert!((t.data()[1] - 0.1 / 3.0).abs() < 1e-17);
}

fn clean_task() -> SyntheticTask {
    SyntheticTask {
        noise_std: 0.0,
        ..Default::default()
    }
}

fn frames_reversed(clip: &Tensor<f64>) -> Tensor<f64> {
    let s = clip.shape().to_vec();
    let per = s[1] * s[2] * s[3];
    Tensor::from_fn(&s, |i| clip.data()[(s[0] - 1 - i / per) * per + i % per])
}

#[test]
fn reversed_clip_is_a_valid_clip_of_the_opposite_class() {
    let task = clean_task();
    for class in 0..4 {
        let mut rng = SeededRng::seed_from_u64(class as u64);
        let path = task.trajectory(class, &mut rng);
        let clip: Tensor<f64> = task
            .generate_clip(class, &mut SeededRng::seed_from_u64(class as u64))
            .unwrap();
        let rev = frames_reversed(&clip);
        let opposite = SyntheticTask::reverse_label(class);
        // the reversed path moves the opposite way at the same speed
        let back: Vec<_> = path.iter().rev().copied().collect();
        let (dy, dx) = (
            back[1].0 as isize - back[0].0 as isize,
            back[1].1 as isize - back[0].1 as isize,
        );
        let expect = match opposite {
            0 => (0, -2),
            1 => (0, 2),
            2 => (-2, 0),
            _ => (2, 0),
        };
        assert_eq!((dy, dx), expect);
        // and its frames are exactly those of a clip drawn along that path
        for (t, &(y0, x0)) in back.iter().enumerate() {
            for y in 0..32 {
                for x in 0..32 {
                    let inside = (y0..y0 + 6).contains(&y) && (x0..x0 + 6).contains(&x);
                    assert_eq!(rev.at(&[t, y, x, 0]), if inside { 1.0 } else { 0.0 });
                }
            }
        }
    }
}

#[test]
fn noise_free_pixels_are_binary_and_centroid_moves_at_speed() {
    let task = clean_task();
    let clip: Tensor<f64> = task.generate_clip(3, &mut SeededRng::seed_from_u64(9)).unwrap();
    assert!(clip.data().iter().all(|&v| v == 0.0 || v == 1.0));
    let centroid = |t: usize| {
        let (mut sy, mut n) = (0.0, 0.0);
        for y in 0..32 {
            for x in 0..32 {
                let v = clip.at(&[t, y, x, 0]);
                sy += v * y as f64;
                n += v;
            }
        }
        sy / n
    };
    let disp = (centroid(7) - centroid(0)) / 7.0;
    assert_eq!(disp, 2.0);
}

#[test]
fn opposite_classes_share_frame_multisets() {
    // Every left path is a right path run backwards, so sorting frames by
    // content gives the same multiset for both directions.
    let task = clean_task();
    let mut rng = SeededRng::seed_from_u64(4);
    let left: Tensor<f64> = task.generate_clip(0, &mut rng).unwrap();
    let right = frames_reversed(&left);
    let per = 32 * 32;
    let mut a: Vec<&[f64]> = left.data().chunks_exact(per).collect();
    let mut b: Vec<&[f64]> = right.data().chunks_exact(per).collect();
    a.sort_by(|x, y| x.partial_cmp(y).unwrap());
    b.sort_by(|x, y| x.partial_cmp(y).unwrap());
    assert_eq!(a, b);
}

#[test]
fn motion_that_leaves_the_frame_is_rejected() {
    let task = SyntheticTask {
        speed: 5,
        ..Default::default()
    };
    assert!(matches!(task.validate(), Err(Error::Config(_))));
}

#[test]
fn flip_swaps_left_and_right_only() {
    assert_eq!(SyntheticTask::flip_label(0), 1);
    assert_eq!(SyntheticTask::flip_label(1), 0);
    assert_eq!(SyntheticTask::flip_label(2), 2);
    assert_eq!(SyntheticTask::flip_label(3), 3);
    let task = clean_task();
    let clip: Tensor<f64> = task.generate_clip(1, &mut SeededRng::seed_from_u64(2)).unwrap();
    let mut flipped = clip.clone();
    flip_clip(flipped.data_mut(), [8, 32, 32, 1]);
    for t in 0..8 {
        for y in 0..32 {
            for x in 0..32 {
                assert_eq!(flipped.at(&[t, y, x, 0]), clip.at(&[t, y, 31 - x, 0]));
            }
        }
    }
}

#[test]
fn dataset_round_trip() {
    let task = SyntheticTask {
        train_size: 12,
        ..Default::default()
    };
    let data: Dataset<f64> = task.dataset(12, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    data.save(dir.path()).unwrap();
    let back = Dataset::<f64>::load(dir.path()).unwrap();
    assert_eq!(back.len(), 12);
    for i in 0..12 {
        assert_eq!(back.clip(i), data.clip(i));
        assert_eq!(back.label(i), data.label(i));
    }
}

fn micro_model() -> ModelConfig {
    let mut m = ModelConfig::preset("tiny").unwrap();
    m.network.embed_dim = 4;
    m.network.blocks_per_stage = [1, 1, 1, 1];
    m.network.in_channels = 1;
    m.network.num_classes = 4;
    m.network.frames = 4;
    m.network.height = 32;
    m.network.width = 32;
    m.focal.variant = DesignVariant::Parallel;
    m
}

fn micro_data() -> (Dataset<f64>, Dataset<f64>) {
    let task = SyntheticTask {
        frames: 4,
        ..Default::default()
    };
    (task.dataset(8, 1).unwrap(), task.dataset(4, 2).unwrap())
}

fn micro_config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        warmup_epochs: 1,
        batch_size: 4,
        base_lr: 0.5,
        mixup_prob: 0.5,
        cutmix_prob: 0.5,
        flip_prob: 0.5,
        seed: 3,
        ..Default::default()
    }
}

#[test]
fn seeded_runs_write_identical_logs() {
    let (tr, te) = micro_data();
    let dir = tempfile::tempdir().unwrap();
    let logs: Vec<String> = (0..2)
        .map(|i| {
            let path = dir.path().join(format!("m{i}.log"));
            let hooks = TrainHooks {
                metrics_log: Some(&path),
                flip_label: Some(SyntheticTask::flip_label),
                ..Default::default()
            };
            train(&micro_model(), &micro_config(), &tr, &te, hooks).unwrap();
            std::fs::read_to_string(&path).unwrap()
        })
        .collect();
    assert_eq!(logs[0], logs[1]);
    assert_eq!(logs[0].lines().count(), 2);
    assert!(logs[0].starts_with("epoch 1 loss "));
}

#[test]
fn zero_learning_rate_leaves_parameters_alone() {
    let (tr, te) = micro_data();
    let cfg = TrainConfig {
        base_lr: 0.0,
        ..micro_config()
    };
    let before = Network::<f64>::new(&micro_model(), cfg.seed).unwrap();
    let out = train(&micro_model(), &cfg, &tr, &te, TrainHooks::default()).unwrap();
    assert_eq!(out.network.store.values(), before.store.values());
}

#[test]
fn divergence_aborts_with_the_step() {
    let (tr, te) = micro_data();
    let cfg = TrainConfig {
        base_lr: 1e30,
        warmup_epochs: 0,
        mixup_prob: 0.0,
        cutmix_prob: 0.0,
        ..micro_config()
    };
    match train(&micro_model(), &cfg, &tr, &te, TrainHooks::default()) {
        Err(Error::Numeric(msg)) => assert!(msg.contains("step"), "{msg}"),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("training did not diverge"),
    }
}

#[test]
fn out_of_range_labels_are_rejected() {
    let (_, te) = micro_data();
    let bad = Dataset::new(vec![te.clip(0).clone()], vec![7]).unwrap();
    assert!(matches!(
        train(&micro_model(), &micro_config(), &bad, &te, TrainHooks::default()),
        Err(Error::Config(_))
    ));
}

#[test]
fn evaluation_is_deterministic_and_bounded() {
    let (tr, _) = micro_data();
    let net = Network::<f64>::new(&micro_model(), 0).unwrap();
    let a = evaluate(&net, &tr, 3).unwrap();
    assert_eq!(a, evaluate(&net, &tr, 8).unwrap());
    assert!((0.0..=1.0).contains(&a));
}

#[test]
fn argmax_picks_first_maximum() {
    let s = Tensor::new(vec![2, 3], vec![0.1, 0.7, 0.7, -1.0, -2.0, -0.5]).unwrap();
    assert_eq!(argmax_rows(&s), vec![1, 2]);
}

#[test]
fn f32_training_runs() {
    let task = SyntheticTask {
        frames: 4,
        ..Default::default()
    };
    let (tr, te): (Dataset<f32>, Dataset<f32>) = (task.dataset(4, 1).unwrap(), task.dataset(4, 2).unwrap());
    let out = train(&micro_model(), &micro_config(), &tr, &te, TrainHooks::default()).unwrap();
    assert!(out.metrics.iter().all(|m| m.loss.is_finite()));
    let mut g = Graph::<f32>::new();
    let x = g.input(tr.batch(&[0, 1]));
    let y = out.network.forward(&mut g, x, None).unwrap();
    assert_eq!(g.shape(y), &[2, 4]);
}
