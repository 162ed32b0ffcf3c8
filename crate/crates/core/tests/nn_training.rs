use quanv_core::data::{generate_synthetic, image_to_tensor};
use quanv_core::nn::{self, ConvLayer, DenseLayer, Layer, LabeledSet, PoolKind, PoolLayer, Shape, Tensor, TrainConfig};
use quanv_core::Network;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor {
    Tensor::new(shape, (0..shape.len()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Every layer type, with strides above one on both conv and pool.
fn small_network(seed: u64) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = vec![
        Layer::Conv(ConvLayer::new(3, 3, 2, 2, &mut rng)),
        Layer::Relu,
        Layer::Pool(PoolLayer { kind: PoolKind::Max, window: 2, stride: 1 }),
        Layer::Conv(ConvLayer::new(4, 2, 3, 1, &mut rng)),
        Layer::Pool(PoolLayer { kind: PoolKind::Average, window: 2, stride: 2 }),
        Layer::Dense(DenseLayer::new(4, 4, &mut rng)),
    ];
    Network::new(Shape::new(9, 9, 2), layers).unwrap()
}

fn batch_loss(net: &Network, inputs: &[Tensor], labels: &[usize]) -> f64 {
    inputs
        .iter()
        .zip(labels)
        .map(|(x, &y)| -nn::softmax(&net.forward(x).unwrap())[y].ln())
        .sum::<f64>()
        / inputs.len() as f64
}

#[test]
fn gradients_match_central_differences() {
    const STEP: f64 = 1e-5;
    for seed in 0..5u64 {
        let mut net = small_network(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let inputs: Vec<Tensor> = (0..3).map(|_| random_tensor(&mut rng, net.input_shape())).collect();
        let labels: Vec<usize> = (0..3).map(|_| rng.random_range(0..4)).collect();
        let (_, grads) = net.loss_and_gradients(&inputs, &labels).unwrap();
        let analytic = grads.flatten();
        let params = net.parameters();
        assert_eq!(analytic.len(), params.len());
        for i in 0..params.len() {
            let mut shifted = params.clone();
            shifted[i] = params[i] + STEP;
            net.set_parameters(&shifted).unwrap();
            let up = batch_loss(&net, &inputs, &labels);
            shifted[i] = params[i] - STEP;
            net.set_parameters(&shifted).unwrap();
            let down = batch_loss(&net, &inputs, &labels);
            let numeric = (up - down) / (2.0 * STEP);
            let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-6);
            assert!(rel < 1e-4, "seed {seed} param {i}: {} vs {numeric}", analytic[i]);
        }
        net.set_parameters(&params).unwrap();
    }
}

/// Four quadrant clusters with a margin; a linear softmax separates them.
fn quadrants(count: usize, seed: u64) -> LabeledSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for i in 0..count {
        let label = i % 4;
        let sx = if label & 1 == 0 { 1.0 } else { -1.0 };
        let sy = if label & 2 == 0 { 1.0 } else { -1.0 };
        let x = sx * rng.random_range(0.2..1.0);
        let y = sy * rng.random_range(0.2..1.0);
        inputs.push(Tensor::new(Shape::new(1, 1, 2), vec![x, y]).unwrap());
        labels.push(label);
    }
    LabeledSet::new(inputs, labels).unwrap()
}

fn linear_model(seed: u64) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Network::new(Shape::new(1, 1, 2), vec![Layer::Dense(DenseLayer::new(2, 4, &mut rng))]).unwrap()
}

#[test]
fn separable_set_is_learned_within_200_iterations() {
    let train = quadrants(320, 1);
    let test = quadrants(80, 2);
    let mut net = linear_model(3);
    let cfg = TrainConfig { learning_rate: 0.5, epochs: 20, batch_size: 32, seed: 4, eval_every: 10 };
    let rows = nn::train(&mut net, &train, &test, &cfg).unwrap();
    assert_eq!(rows.last().unwrap().iteration, 200);
    assert!(net.accuracy(&train).unwrap() > 0.95);
}

#[test]
fn zero_learning_rate_leaves_weights_alone() {
    let train = quadrants(64, 5);
    let mut net = linear_model(6);
    let before = net.parameters();
    let cfg = TrainConfig { learning_rate: 0.0, epochs: 3, seed: 7, eval_every: 1, ..Default::default() };
    let rows = nn::train(&mut net, &train, &train, &cfg).unwrap();
    assert_eq!(net.parameters(), before);
    assert!(rows.windows(2).all(|w| w[0].test_accuracy == w[1].test_accuracy && w[0].train_loss == w[1].train_loss));
}

fn synthetic_sets() -> (LabeledSet, LabeledSet) {
    let ds = generate_synthetic(125, 7).unwrap();
    let (train, test) = ds.split(400, 100, 1).unwrap();
    let to_set = |d: &quanv_core::Dataset| {
        LabeledSet::new(d.images().iter().map(image_to_tensor).collect(), d.labels().to_vec()).unwrap()
    };
    (to_set(&train), to_set(&test))
}

#[test]
fn fixed_seed_repeats_the_metric_stream() {
    let (train, test) = synthetic_sets();
    let cfg = TrainConfig { epochs: 2, seed: 9, eval_every: 5, ..Default::default() };
    let run = || {
        let mut net = nn::reference_cnn(2);
        let rows = nn::train(&mut net, &train, &test, &cfg).unwrap();
        (rows, net.parameters())
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    assert_eq!(pa, pb);
}

#[test]
fn reference_cnn_learns_synthetic_classes() {
    let (train, test) = synthetic_sets();
    let mut net = nn::reference_cnn(1);
    // 400 examples at batch 32 is 13 steps an epoch; 16 epochs is 208 steps.
    let cfg = TrainConfig { epochs: 16, seed: 1, eval_every: 13, ..Default::default() };
    let rows = nn::train(&mut net, &train, &test, &cfg).unwrap();
    let first_200 = rows.iter().rfind(|r| r.iteration <= 200).unwrap();
    assert!(first_200.test_accuracy > 0.9, "{rows:?}");
}
