//! Property tests for the structural invariants: forward determinism, shape
//! algebra, activation ranges, batching completeness, and optimizer descent.

use proptest::prelude::*;
use tourbillon_core::{
    apply_updates, batches, Activation, Dataset, InitScheme, Layer, LayerSpec, Network,
    OptimizerState, Padding, Rng, Tensor, UpdateSet,
};

fn dense_net(dims: &[usize], act: Activation, seed: u64) -> Network {
    let mut rng = Rng::new(seed);
    let mut layers = Vec::new();
    for w in dims.windows(2) {
        layers.push(Layer::new(LayerSpec::dense(w[0], w[1]), InitScheme::Glorot, &mut rng));
        layers.push(Layer::fixed(LayerSpec::activation(act)));
    }
    Network::new(layers)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn forward_is_deterministic(seed in 0u64..1_000_000, batch in 1usize..4) {
        let net = dense_net(&[5, 4, 3], Activation::Tanh, seed);
        let mut rng = Rng::new(seed ^ 0xABCD);
        let x = Tensor::from_vec(
            &[batch, 5],
            (0..batch * 5).map(|_| rng.uniform(-2.0, 2.0)).collect(),
        ).unwrap();
        let a = net.forward(&x).unwrap();
        let b = net.forward(&x).unwrap();
        for (ta, tb) in a.outputs.iter().zip(&b.outputs) {
            prop_assert_eq!(ta.data(), tb.data());
        }
    }

    #[test]
    fn pool_then_upsample_restores_even_dims(h in 1usize..12, w in 1usize..12, c in 1usize..4) {
        let (h, w) = (h * 2, w * 2);
        let net = Network::new(vec![
            Layer::fixed(LayerSpec::MaxPool2d { window: 2 }),
            Layer::fixed(LayerSpec::Upsample2d { factor: 2 }),
        ]);
        let shapes = net.infer_shapes(&[h, w, c]).unwrap();
        prop_assert_eq!(shapes.last().unwrap().clone(), vec![h, w, c]);
    }

    #[test]
    fn conv_same_padding_preserves_spatial(h in 3usize..16, w in 3usize..16, k in 1usize..6) {
        let spec = LayerSpec::conv2d(k, 2, 3, 1, Padding::Same);
        let out = spec.out_shape(&[h, w, 2]).unwrap();
        prop_assert_eq!(out, vec![h, w, 3]);
    }

    #[test]
    fn activation_ranges_hold(seed in 0u64..1_000_000) {
        let mut rng = Rng::new(seed);
        let x = Tensor::from_vec(&[1, 32], (0..32).map(|_| rng.uniform(-8.0, 8.0)).collect()).unwrap();
        let tanh_net = Network::new(vec![Layer::fixed(LayerSpec::activation(Activation::Tanh))]);
        let y = tanh_net.forward(&x).unwrap();
        prop_assert!(y.output().data().iter().all(|&v| (-1.0..=1.0).contains(&v) && v.abs() < 1.0));
        let log_net = Network::new(vec![Layer::fixed(LayerSpec::activation(Activation::Logistic))]);
        let y = log_net.forward(&x).unwrap();
        prop_assert!(y.output().data().iter().all(|&v| v > 0.0 && v < 1.0));
        let soft_net = Network::new(vec![Layer::fixed(LayerSpec::activation(Activation::Softmax))]);
        let y = soft_net.forward(&x).unwrap();
        let sum: f64 = y.output().data().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn every_sample_appears_once_per_epoch(n in 1usize..200, batch in 1usize..70, seed in 0u64..10_000) {
        let ds = Dataset::new(Tensor::zeros(&[n, 2]), None).unwrap();
        let mut rng = Rng::new(seed);
        let idx: Vec<usize> = batches(&ds, batch, &mut rng, true).into_iter().flatten().collect();
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn forward_outputs_stay_finite(seed in 0u64..1_000_000) {
        let net = dense_net(&[6, 5, 4], Activation::Logistic, seed);
        let mut rng = Rng::new(seed ^ 0x5EED);
        let x = Tensor::from_vec(&[2, 6], (0..12).map(|_| rng.uniform(-3.0, 3.0)).collect()).unwrap();
        let acts = net.forward(&x).unwrap();
        for out in &acts.outputs {
            prop_assert!(out.all_finite());
        }
    }
}

#[test]
fn plain_sgd_descends_convex_quadratic() {
    // L(w) = 0.5 * (w - 3)^2 on a scalar layer; updates = -eta * dL/dw
    let mut net = Network::new(vec![Layer::with_params(
        LayerSpec::dense(1, 1),
        Tensor::from_vec(&[1, 1], vec![0.0]).unwrap(),
        Tensor::zeros(&[1]),
    )]);
    let mut state = OptimizerState::new(&net, 0.0);
    let eta = 0.1;
    let mut last = f64::INFINITY;
    for _ in 0..50 {
        let w = net.layers[0].weights.as_ref().unwrap().data()[0];
        let loss = 0.5 * (w - 3.0) * (w - 3.0);
        assert!(loss < last || loss == 0.0, "loss must strictly decrease: {loss} vs {last}");
        last = loss;
        let grad = w - 3.0;
        let mut u = UpdateSet::empty(&net);
        u.set(
            0,
            Tensor::from_vec(&[1, 1], vec![-eta * grad]).unwrap(),
            Tensor::zeros(&[1]),
        );
        apply_updates(&mut net, &u, &mut state).unwrap();
    }
    assert!(last < 1e-3, "should approach the minimum, got {last}");
}
