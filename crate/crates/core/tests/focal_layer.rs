//! The modulation layer against a loop-level reference and its structural
//! properties.

use rand::SeedableRng;
use stfocal::focal::{
    contextualize_spatial, contextualize_temporal, gated_aggregate, FocalLayer, Fusion, MixerKind, Modulators,
};
use stfocal::kernels::elementwise::gelu_scalar;
use stfocal::{DesignVariant, Error, FocalConfig, Graph, ParamStore, SeededRng, Tensor};
use stfocal_oracles as oracle;

struct Fixture {
    store: ParamStore<f64>,
    layer: FocalLayer,
}

fn fixture(kind: MixerKind, dim: usize, cfg: &FocalConfig, seed: u64) -> Fixture {
    let mut store = ParamStore::new();
    let mut rng = SeededRng::seed_from_u64(seed);
    let layer = FocalLayer::new(&mut store, &mut rng, "m", kind, dim, cfg).unwrap();
    // Default init leaves biases at zero and weights tiny; randomise
    // everything so each term of the layer is visible in the output.
    for v in store.values_mut() {
        *v = Tensor::randn(v.shape(), 0.5, &mut rng);
    }
    Fixture { store, layer }
}

struct Run {
    y: Tensor<f64>,
    spatial: Option<Tensor<f64>>,
    temporal: Option<Tensor<f64>>,
}

fn run(f: &Fixture, x: &Tensor<f64>) -> Run {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let mut mods = Modulators::default();
    let y = f.layer.forward(&mut g, &f.store, xv, Some(&mut mods)).unwrap().unwrap();
    Run {
        y: g.value(y).clone(),
        spatial: mods.spatial.map(|v| g.value(v).clone()),
        temporal: mods.temporal.map(|v| g.value(v).clone()),
    }
}

fn param(store: &ParamStore<f64>, name: &str) -> Vec<f64> {
    store
        .get(store.id(name).unwrap_or_else(|| panic!("no {name}")))
        .data()
        .to_vec()
}

fn reference_weights(f: &Fixture, cfg: &FocalConfig) -> oracle::FocalWeights {
    let s = &f.store;
    let branch = |tag: &str| {
        s.id(&format!("m.{tag}_in_proj.weight")).map(|_| oracle::BranchWeights {
            in_w: param(s, &format!("m.{tag}_in_proj.weight")),
            in_b: param(s, &format!("m.{tag}_in_proj.bias")),
            kernels: cfg
                .kernels()
                .iter()
                .enumerate()
                .map(|(l, &k)| (k, param(s, &format!("m.{tag}_hc{l}.kernel"))))
                .collect(),
            ctx_w: param(s, &format!("m.{tag}_ctx_proj.weight")),
        })
    };
    oracle::FocalWeights {
        c: f.layer.dim(),
        q_w: param(s, "m.q_proj.weight"),
        q_b: param(s, "m.q_proj.bias"),
        spatial: branch("spatial"),
        temporal: branch("temporal"),
        out_w: param(s, "m.out_proj.weight"),
        out_b: param(s, "m.out_proj.bias"),
    }
}

fn assert_close(a: &[f64], b: &[f64], tol: f64, what: &str) {
    assert_eq!(a.len(), b.len(), "{what}: length");
    let worst = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(worst <= tol, "{what}: max abs diff {worst:e} > {tol:e}");
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut SeededRng::seed_from_u64(seed))
}

#[test]
fn matches_loop_reference() {
    let cfg = FocalConfig::default();
    let dims = [2, 3, 5, 4, 6];
    let x = randn(&dims, 3);
    for kind in [MixerKind::SpatioTemporal, MixerKind::Spatial, MixerKind::Temporal] {
        let f = fixture(kind, 6, &cfg, 7);
        let got = run(&f, &x);
        let want = oracle::focal_modulation(x.data(), dims, &reference_weights(&f, &cfg));
        assert_close(got.y.data(), &want.y, 1e-10, &format!("{kind:?} output"));
        assert_eq!(got.spatial.is_some(), want.spatial.is_some());
        assert_eq!(got.temporal.is_some(), want.temporal.is_some());
        if let (Some(a), Some(b)) = (&got.spatial, &want.spatial) {
            assert_close(a.data(), b, 1e-10, "spatial modulator");
        }
        if let (Some(a), Some(b)) = (&got.temporal, &want.temporal) {
            assert_close(a.data(), b, 1e-10, "temporal modulator");
        }
    }
}

#[test]
fn output_shape_equals_input_shape() {
    let f = fixture(MixerKind::SpatioTemporal, 16, &FocalConfig::default(), 1);
    let r = run(&f, &randn(&[2, 4, 8, 8, 16], 2));
    assert_eq!(r.y.shape(), &[2, 4, 8, 8, 16]);
}

#[test]
fn kernel_schedule() {
    assert_eq!(FocalConfig::default().kernels(), vec![3, 5]);
    let cfg = FocalConfig {
        focal_levels: 4,
        base_kernel: 5,
        ..Default::default()
    };
    assert_eq!(cfg.kernels(), vec![5, 7, 9, 11]);
    let even = FocalConfig {
        base_kernel: 4,
        ..Default::default()
    };
    assert!(matches!(even.validate(), Err(Error::Config(_))));
    let odd_step = FocalConfig {
        kernel_step: 3,
        ..Default::default()
    };
    assert!(matches!(odd_step.validate(), Err(Error::Config(_))));
}

fn spatial_levels(z0: &Tensor<f64>, kernels: &[Tensor<f64>]) -> Vec<Tensor<f64>> {
    let mut g = Graph::new();
    let z = g.input(z0.clone());
    let ks: Vec<_> = kernels.iter().map(|k| g.input(k.clone())).collect();
    let levels = contextualize_spatial(&mut g, z, &ks).unwrap();
    levels.iter().map(|&l| g.value(l).clone()).collect()
}

fn temporal_levels(z0: &Tensor<f64>, kernels: &[Tensor<f64>]) -> Vec<Tensor<f64>> {
    let mut g = Graph::new();
    let z = g.input(z0.clone());
    let ks: Vec<_> = kernels.iter().map(|k| g.input(k.clone())).collect();
    let levels = contextualize_temporal(&mut g, z, &ks).unwrap();
    levels.iter().map(|&l| g.value(l).clone()).collect()
}

#[test]
fn spatial_hierarchy_has_one_level_per_kernel_plus_global() {
    let levels = spatial_levels(&randn(&[2, 6, 6, 3], 1), &[randn(&[3, 3, 3], 2), randn(&[5, 5, 3], 3)]);
    assert_eq!(levels.len(), 3);
    assert!(levels.iter().all(|l| l.shape() == [2, 6, 6, 3]));
}

#[test]
fn constant_input_gives_gelu_of_scaled_constant_in_interior() {
    let c = 0.7;
    // per-channel kernel sums 1.5 and -0.25
    let k = Tensor::from_fn(&[3, 3, 2], |i| if i % 2 == 0 { 1.5 / 9.0 } else { -0.25 / 9.0 });
    let levels = spatial_levels(&Tensor::full(&[1, 5, 5, 2], c), &[k]);
    for (ch, s) in [(0, 1.5), (1, -0.25)] {
        for i in 1..4 {
            for j in 1..4 {
                let v = levels[0].at(&[0, i, j, ch]);
                assert!((v - gelu_scalar(c * s)).abs() <= 1e-15);
            }
        }
    }
}

#[test]
fn single_pixel_frames_use_centre_taps() {
    let z0 = randn(&[3, 1, 1, 4], 1);
    let ks = [randn(&[3, 3, 4], 2), randn(&[5, 5, 4], 3)];
    let levels = spatial_levels(&z0, &ks);
    for n in 0..3 {
        for ch in 0..4 {
            let l1 = gelu_scalar(z0.at(&[n, 0, 0, ch]) * ks[0].at(&[1, 1, ch]));
            let l2 = gelu_scalar(l1 * ks[1].at(&[2, 2, ch]));
            assert_eq!(levels[0].at(&[n, 0, 0, ch]), l1);
            assert_eq!(levels[1].at(&[n, 0, 0, ch]), l2);
            assert_eq!(levels[2].at(&[n, 0, 0, ch]), gelu_scalar(l2));
        }
    }
}

#[test]
fn temporal_hierarchy_single_frame_is_pointwise() {
    let z0 = randn(&[4, 1, 3], 5);
    let ks = [randn(&[3, 3], 6), randn(&[5, 3], 7)];
    let levels = temporal_levels(&z0, &ks);
    for n in 0..4 {
        for ch in 0..3 {
            let l1 = gelu_scalar(z0.at(&[n, 0, ch]) * ks[0].at(&[1, ch]));
            let l2 = gelu_scalar(l1 * ks[1].at(&[2, ch]));
            assert_eq!(levels[1].at(&[n, 0, ch]), l2);
            assert_eq!(levels[2].at(&[n, 0, ch]), gelu_scalar(l2));
        }
    }
}

#[test]
fn temporal_delta_kernel_is_identity_before_activation() {
    let z0 = randn(&[2, 3, 4], 8);
    let delta = Tensor::from_fn(&[3, 4], |i| if i / 4 == 1 { 1.0 } else { 0.0 });
    let levels = temporal_levels(&z0, &[delta]);
    for (v, z) in levels[0].data().iter().zip(z0.data()) {
        assert_eq!(*v, gelu_scalar(*z));
    }
}

#[test]
fn temporal_hierarchy_matches_loop_reference() {
    let (n, t, c) = (5, 7, 3);
    let z0 = randn(&[n, t, c], 9);
    let ks = [randn(&[3, c], 10), randn(&[5, c], 11)];
    let levels = temporal_levels(&z0, &ks);
    let mut ctx = z0.data().to_vec();
    for (l, k) in ks.iter().enumerate() {
        ctx = oracle::dwconv1d(&ctx, n, t, c, k.data(), k.shape()[0])
            .into_iter()
            .map(oracle::gelu)
            .collect();
        assert_close(levels[l].data(), &ctx, 1e-12, "temporal level");
    }
    for s in 0..n {
        for ch in 0..c {
            let mean = (0..t).map(|ti| ctx[(s * t + ti) * c + ch]).sum::<f64>() / t as f64;
            for ti in 0..t {
                assert!((levels[2].at(&[s, ti, ch]) - oracle::gelu(mean)).abs() <= 1e-12);
            }
        }
    }
}

fn aggregate(levels: &[Tensor<f64>], gates: &Tensor<f64>) -> stfocal::Result<Tensor<f64>> {
    let mut g = Graph::new();
    let ls: Vec<_> = levels.iter().map(|l| g.input(l.clone())).collect();
    let gv = g.input(gates.clone());
    let out = gated_aggregate(&mut g, &ls, gv)?;
    Ok(g.value(out).clone())
}

#[test]
fn gated_aggregate_selection_zero_and_reference() {
    let levels: Vec<_> = (0..3).map(|l| randn(&[2, 3, 3, 4], 20 + l)).collect();
    for j in 0..3 {
        let onehot = Tensor::from_fn(&[2, 3, 3, 3], |i| if i % 3 == j { 1.0 } else { 0.0 });
        assert_eq!(aggregate(&levels, &onehot).unwrap(), levels[j]);
    }
    let zero = aggregate(&levels, &Tensor::zeros(&[2, 3, 3, 3])).unwrap();
    assert!(zero.data().iter().all(|&v| v == 0.0));
    let gates = randn(&[2, 3, 3, 3], 30);
    let flat: Vec<Vec<f64>> = levels.iter().map(|l| l.data().to_vec()).collect();
    let want = oracle::gated_sum(&flat, gates.data(), 4);
    assert_eq!(aggregate(&levels, &gates).unwrap().data(), &want[..]);
    assert!(aggregate(&levels, &Tensor::zeros(&[2, 3, 3, 2])).is_err());
}

#[test]
fn identical_frames_give_identical_interior_outputs() {
    // Zero padding along time makes border frames see fewer neighbours, so
    // only frames whose temporal receptive field (1 + 2 frames for kernels
    // 3 and 5) stays inside the clip are compared.
    let (t, h, w, c) = (9, 4, 4, 6);
    let frame = randn(&[1, 1, h, w, c], 40);
    let x = Tensor::from_fn(&[1, t, h, w, c], |i| frame.data()[i % (h * w * c)]);
    let f = fixture(MixerKind::SpatioTemporal, c, &FocalConfig::default(), 41);
    let r = run(&f, &x);
    let per = h * w * c;
    let frame_of = |v: &Tensor<f64>, ti: usize| v.data()[ti * per..(ti + 1) * per].to_vec();
    let temporal = r.temporal.unwrap();
    for ti in 4..=5 {
        assert_eq!(frame_of(&temporal, ti), frame_of(&temporal, 3));
        assert_eq!(frame_of(&r.y, ti), frame_of(&r.y, 3));
    }
    // the spatial branch never looks across frames
    let spatial = r.spatial.unwrap();
    for ti in 1..t {
        assert_eq!(frame_of(&spatial, ti), frame_of(&spatial, 0));
    }
}

#[test]
fn fusions_are_not_interchangeable() {
    let x = randn(&[1, 3, 4, 4, 6], 50);
    let outs: Vec<Tensor<f64>> = [Fusion::Multiply, Fusion::Average, Fusion::LearnedProjection]
        .into_iter()
        .map(|fusion| {
            let cfg = FocalConfig {
                fusion,
                ..Default::default()
            };
            run(&fixture(MixerKind::SpatioTemporal, 6, &cfg, 51), &x).y
        })
        .collect();
    assert!(outs[0].diff_norm(&outs[1]) > 1e-3);
    assert!(outs[0].diff_norm(&outs[2]) > 1e-3);
    assert!(outs[1].diff_norm(&outs[2]) > 1e-3);
}

#[test]
fn average_fusion_is_mean_of_modulators() {
    let cfg = FocalConfig {
        fusion: Fusion::Average,
        ..Default::default()
    };
    let mut f = fixture(MixerKind::SpatioTemporal, 4, &cfg, 52);
    let eye = Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
    let out = f.layer.out_proj().unwrap().clone();
    f.store.set(out.weight, eye).unwrap();
    f.store.set(out.bias.unwrap(), Tensor::zeros(&[4])).unwrap();
    let r = run(&f, &randn(&[1, 2, 3, 3, 4], 53));
    let (s, t) = (r.spatial.unwrap(), r.temporal.unwrap());
    let mut g = Graph::new();
    let xv = g.input(randn(&[1, 2, 3, 3, 4], 53));
    let q = f.layer.q_proj().unwrap().forward(&mut g, &f.store, xv).unwrap();
    let q = g.value(q).clone();
    for i in 0..q.numel() {
        let want = q.data()[i] * (s.data()[i] + t.data()[i]) * 0.5;
        assert!((r.y.data()[i] - want).abs() <= 1e-12);
    }
}

/// Spatial modulator of a layer whose global gate is forced to zero, so
/// that every level is a local function of the input.
fn local_spatial_modulator(f: &Fixture, x: &Tensor<f64>) -> Tensor<f64> {
    run(f, x).spatial.unwrap()
}

#[test]
fn spatial_modulator_is_translation_equivariant_in_the_interior() {
    let (h, w, c) = (12, 12, 4);
    let cfg = FocalConfig::default();
    let mut f = fixture(MixerKind::Spatial, c, &cfg, 60);
    let inp = f.layer.in_proj(false).unwrap().clone();
    let levels = cfg.focal_levels;
    let gate_col = c + levels;
    let mut wt = f.store.get(inp.weight).clone();
    for r in 0..c {
        let o = wt.offset(&[r, gate_col]);
        wt.data_mut()[o] = 0.0;
    }
    f.store.set(inp.weight, wt).unwrap();
    let mut bias = f.store.get(inp.bias.unwrap()).clone();
    bias.data_mut()[gate_col] = 0.0;
    f.store.set(inp.bias.unwrap(), bias).unwrap();

    let x = randn(&[1, 1, h, w, c], 61);
    // shift right by one pixel, zero fill
    let shifted = Tensor::from_fn(&[1, 1, h, w, c], |i| {
        let j = (i / c) % w;
        if j == 0 {
            0.0
        } else {
            x.data()[i - c]
        }
    });
    let (m, ms) = (local_spatial_modulator(&f, &x), local_spatial_modulator(&f, &shifted));
    let radius: usize = cfg.kernels().iter().map(|k| (k - 1) / 2).sum();
    let mut compared = 0;
    for i in radius..h - radius {
        for j in radius + 1..w - radius {
            for ch in 0..c {
                assert_eq!(ms.at(&[0, 0, i, j, ch]), m.at(&[0, 0, i, j - 1, ch]));
                compared += 1;
            }
        }
    }
    assert!(compared > 0);
}

#[test]
fn scaling_the_query_scales_the_output() {
    let mut f = fixture(MixerKind::SpatioTemporal, 5, &FocalConfig::default(), 70);
    let out = f.layer.out_proj().unwrap().clone();
    let eye = Tensor::from_fn(&[5, 5], |i| if i / 5 == i % 5 { 1.0 } else { 0.0 });
    f.store.set(out.weight, eye).unwrap();
    f.store.set(out.bias.unwrap(), Tensor::zeros(&[5])).unwrap();
    let q = f.layer.q_proj().unwrap().clone();
    f.store.set(q.bias.unwrap(), Tensor::zeros(&[5])).unwrap();
    let x = randn(&[1, 2, 3, 3, 5], 71);
    let base = run(&f, &x).y;
    for alpha in [2.0, -0.5, 3.25] {
        let scaled = f.store.get(q.weight).map(|v| v * alpha);
        let mut g = f.store.clone();
        g.set(q.weight, scaled).unwrap();
        let f2 = Fixture {
            store: g,
            layer: f.layer.clone(),
        };
        let y = run(&f2, &x).y;
        for (a, b) in y.data().iter().zip(base.data()) {
            assert!((a - alpha * b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }
}

#[test]
fn uniform_frames_give_spatially_constant_temporal_modulator() {
    let (t, h, w, c) = (4, 3, 5, 6);
    let series = randn(&[t, c], 80);
    let x = Tensor::from_fn(&[1, t, h, w, c], |i| {
        let ti = i / (h * w * c);
        series.data()[ti * c + i % c]
    });
    let f = fixture(MixerKind::SpatioTemporal, c, &FocalConfig::default(), 81);
    let m = run(&f, &x).temporal.unwrap();
    for ti in 0..t {
        for p in 0..h * w {
            for ch in 0..c {
                assert_eq!(m.data()[(ti * h * w + p) * c + ch], m.data()[ti * h * w * c + ch]);
            }
        }
    }
}

#[test]
fn temporal_modulator_follows_each_location_on_generic_input() {
    // The temporal branch runs per pixel, so on generic input its modulator
    // differs across H, W. Recorded as a known divergence from a stricter
    // constancy requirement.
    let f = fixture(MixerKind::SpatioTemporal, 4, &FocalConfig::default(), 90);
    let m = run(&f, &randn(&[1, 3, 4, 4, 4], 91)).temporal.unwrap();
    let spread = (1..16)
        .map(|p| (m.data()[p * 4] - m.data()[0]).abs())
        .fold(0.0, f64::max);
    assert!(spread > 0.0);
}

#[test]
fn identity_mixer_contributes_nothing() {
    let mut f = fixture(MixerKind::Spatial, 4, &FocalConfig::default(), 100);
    f.layer.disable();
    let mut g = Graph::new();
    let x = g.input(randn(&[1, 1, 2, 2, 4], 1));
    assert!(f.layer.forward(&mut g, &f.store, x, None).unwrap().is_none());
    assert_eq!(
        FocalLayer::param_count(MixerKind::Identity, 4, &FocalConfig::default()),
        0
    );
}

#[test]
fn non_finite_modulator_names_the_layer() {
    let mut f = fixture(MixerKind::SpatioTemporal, 4, &FocalConfig::default(), 110);
    let id = f.store.id("m.temporal_hc0.kernel").unwrap();
    f.store.get_mut(id).data_mut()[0] = f64::NAN;
    let mut g = Graph::new();
    let x = g.input(randn(&[1, 3, 2, 2, 4], 1));
    match f.layer.forward(&mut g, &f.store, x, None) {
        Err(Error::Numeric(msg)) => assert!(msg.contains("m"), "{msg}"),
        other => panic!("expected a numeric fault, got {other:?}"),
    }
}

#[test]
fn wrong_channel_count_is_shape_error() {
    let f = fixture(MixerKind::Spatial, 4, &FocalConfig::default(), 120);
    let mut g = Graph::new();
    let x = g.input(randn(&[1, 1, 2, 2, 3], 1));
    assert!(matches!(
        f.layer.forward(&mut g, &f.store, x, None),
        Err(Error::Shape(_))
    ));
}

#[test]
fn param_count_matches_store() {
    for fusion in [Fusion::Multiply, Fusion::LearnedProjection] {
        let cfg = FocalConfig {
            fusion,
            ..Default::default()
        };
        for kind in [
            MixerKind::Spatial,
            MixerKind::Temporal,
            MixerKind::SpatioTemporal,
            MixerKind::Factorized3d,
        ] {
            let f = fixture(kind, 8, &cfg, 130);
            assert_eq!(
                f.store.total_numel(),
                FocalLayer::param_count(kind, 8, &cfg),
                "{kind:?} {fusion:?}"
            );
        }
    }
}

#[test]
fn variant_names_parse() {
    for v in DesignVariant::ALL {
        assert_eq!(DesignVariant::parse(v.name()).unwrap(), v);
        assert_eq!(DesignVariant::parse(&v.letter().to_string()).unwrap(), v);
    }
    assert!(matches!(DesignVariant::parse("f_unknown"), Err(Error::Config(_))));
}
