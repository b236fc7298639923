//! Parallel and sequential execution give bit-identical results.

use rand::SeedableRng;
use stfocal::{exec, DesignVariant, Embedding, Fusion, Graph, ModelConfig, Network, SeededRng, Tensor};

fn step(net: &Network<f32>, x: &Tensor<f32>, targets: &Tensor<f32>) -> (Vec<f32>, Vec<Vec<f32>>) {
    let mut g = Graph::new();
    let input = g.input(x.clone());
    let mut rng = SeededRng::seed_from_u64(3);
    let logits = net.forward(&mut g, input, Some(&mut rng)).unwrap();
    let loss = g.softmax_cross_entropy(logits, targets).unwrap();
    let grads = g.backward(loss).unwrap().for_params(&net.store);
    (
        g.value(logits).data().to_vec(),
        grads.iter().map(|t| t.data().to_vec()).collect(),
    )
}

#[test]
fn training_step_is_identical_in_both_modes() {
    exec::init_threads(3);
    for (variant, fusion, embedding) in [
        (DesignVariant::Parallel, Fusion::Multiply, Embedding::Patch1),
        (
            DesignVariant::FactorizedConv,
            Fusion::LearnedProjection,
            Embedding::Tubelet2,
        ),
        (DesignVariant::Alternating, Fusion::Average, Embedding::Patch1),
    ] {
        let mut cfg = ModelConfig::preset("tiny").unwrap();
        let n = &mut cfg.network;
        (n.embed_dim, n.frames, n.height, n.width, n.in_channels, n.num_classes) = (16, 4, 64, 64, 1, 4);
        n.embedding = embedding;
        cfg.focal.variant = variant;
        cfg.focal.fusion = fusion;
        let net = Network::<f32>::new(&cfg, 1).unwrap();
        let x = Tensor::randn(&[4, 4, 64, 64, 1], 1.0, &mut SeededRng::seed_from_u64(2));
        let targets = Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        let seq = exec::with_parallel(false, || step(&net, &x, &targets));
        let par = exec::with_parallel(true, || step(&net, &x, &targets));
        assert_eq!(seq, par, "{variant:?}");
    }
}
