//! Small convolutional classifiers trained with mini-batch SGD.
//!
//! Tensors are `height × width × channels`, channel index fastest. All
//! convolutions are valid (unpadded) cross-correlations. Dense layers read
//! the flattened tensor in storage order.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::quanv::FeatureMap;

pub const NUM_CLASSES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Shape {
            height,
            width,
            channels,
        }
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}×{}×{}", self.height, self.width, self.channels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::Shape(format!("{} values for shape {shape}", data.len())));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    fn idx(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.shape.width + x) * self.shape.channels + c
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.idx(y, x, c)]
    }
}

/// Centers features from `[0, 1]` onto `[-1, 1]`, the same input range
/// [`crate::data::image_to_tensor`] gives the classical network.
impl From<&FeatureMap> for Tensor {
    fn from(map: &FeatureMap) -> Self {
        Tensor {
            shape: Shape::new(map.rows(), map.cols(), map.filters()),
            data: map.values().iter().map(|v| 2.0 * v - 1.0).collect(),
        }
    }
}

/// Output side of a valid window sweep.
pub fn output_side(input: usize, window: usize, stride: usize) -> Option<usize> {
    (window >= 1 && stride >= 1 && window <= input).then(|| (input - window) / stride + 1)
}

fn uniform_init(rng: &mut ChaCha8Rng, count: usize, fan_in: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..count).map(|_| rng.random_range(-bound..bound)).collect()
}

/// `filters` kernels of `kernel × kernel × in_channels`, stored
/// `[filter][ky][kx][channel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub filters: usize,
    pub kernel: usize,
    pub in_channels: usize,
    pub stride: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl ConvLayer {
    pub fn new(filters: usize, kernel: usize, in_channels: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = kernel * kernel * in_channels;
        ConvLayer {
            filters,
            kernel,
            in_channels,
            stride,
            weights: uniform_init(rng, filters * fan_in, fan_in),
            biases: vec![0.0; filters],
        }
    }

    fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.channels != self.in_channels {
            return Err(Error::Shape(format!(
                "convolution over {} channels given input {input}",
                self.in_channels
            )));
        }
        match (
            output_side(input.height, self.kernel, self.stride),
            output_side(input.width, self.kernel, self.stride),
        ) {
            (Some(h), Some(w)) => Ok(Shape::new(h, w, self.filters)),
            _ => Err(Error::Shape(format!(
                "{0}×{0} kernel with stride {1} on input {input}",
                self.kernel, self.stride
            ))),
        }
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let shape = self.output_shape(input.shape)?;
        let mut out = Tensor::zeros(shape);
        let k = self.kernel;
        let c_in = self.in_channels;
        let row_len = k * c_in;
        for oy in 0..shape.height {
            for ox in 0..shape.width {
                for f in 0..self.filters {
                    let mut acc = self.biases[f];
                    for ky in 0..k {
                        let w_row = &self.weights[(f * k + ky) * row_len..][..row_len];
                        let start = input.idx(oy * self.stride + ky, ox * self.stride, 0);
                        let x_row = &input.data[start..start + row_len];
                        acc += w_row.iter().zip(x_row).map(|(w, x)| w * x).sum::<f64>();
                    }
                    let i = out.idx(oy, ox, f);
                    out.data[i] = acc;
                }
            }
        }
        Ok(out)
    }

    fn backward(&self, input: &Tensor, grad_out: &Tensor, grads: &mut LayerGrads) -> Tensor {
        let mut grad_in = Tensor::zeros(input.shape);
        let k = self.kernel;
        let row_len = k * self.in_channels;
        let shape = grad_out.shape;
        for oy in 0..shape.height {
            for ox in 0..shape.width {
                for f in 0..self.filters {
                    let g = grad_out.get(oy, ox, f);
                    if g == 0.0 {
                        continue;
                    }
                    grads.biases[f] += g;
                    for ky in 0..k {
                        let w_off = (f * k + ky) * row_len;
                        let start = input.idx(oy * self.stride + ky, ox * self.stride, 0);
                        for j in 0..row_len {
                            grads.weights[w_off + j] += g * input.data[start + j];
                            grad_in.data[start + j] += g * self.weights[w_off + j];
                        }
                    }
                }
            }
        }
        grad_in
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Average,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolLayer {
    pub kind: PoolKind,
    pub window: usize,
    pub stride: usize,
}

impl PoolLayer {
    fn output_shape(&self, input: Shape) -> Result<Shape> {
        match (
            output_side(input.height, self.window, self.stride),
            output_side(input.width, self.window, self.stride),
        ) {
            (Some(h), Some(w)) => Ok(Shape::new(h, w, input.channels)),
            _ => Err(Error::Shape(format!(
                "{0}×{0} pool with stride {1} on input {input}",
                self.window, self.stride
            ))),
        }
    }

    /// Row-major position of the first maximum in a window.
    fn argmax(&self, input: &Tensor, oy: usize, ox: usize, c: usize) -> (usize, usize) {
        let (y0, x0) = (oy * self.stride, ox * self.stride);
        let mut best = (y0, x0);
        for y in y0..y0 + self.window {
            for x in x0..x0 + self.window {
                if input.get(y, x, c) > input.get(best.0, best.1, c) {
                    best = (y, x);
                }
            }
        }
        best
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let shape = self.output_shape(input.shape)?;
        let mut out = Tensor::zeros(shape);
        let area = (self.window * self.window) as f64;
        for oy in 0..shape.height {
            for ox in 0..shape.width {
                for c in 0..shape.channels {
                    let v = match self.kind {
                        PoolKind::Max => {
                            let (y, x) = self.argmax(input, oy, ox, c);
                            input.get(y, x, c)
                        }
                        PoolKind::Average => {
                            let (y0, x0) = (oy * self.stride, ox * self.stride);
                            let mut sum = 0.0;
                            for y in y0..y0 + self.window {
                                for x in x0..x0 + self.window {
                                    sum += input.get(y, x, c);
                                }
                            }
                            sum / area
                        }
                    };
                    let i = out.idx(oy, ox, c);
                    out.data[i] = v;
                }
            }
        }
        Ok(out)
    }

    fn backward(&self, input: &Tensor, grad_out: &Tensor) -> Tensor {
        let mut grad_in = Tensor::zeros(input.shape);
        let area = (self.window * self.window) as f64;
        let shape = grad_out.shape;
        for oy in 0..shape.height {
            for ox in 0..shape.width {
                for c in 0..shape.channels {
                    let g = grad_out.get(oy, ox, c);
                    match self.kind {
                        PoolKind::Max => {
                            let (y, x) = self.argmax(input, oy, ox, c);
                            let i = grad_in.idx(y, x, c);
                            grad_in.data[i] += g;
                        }
                        PoolKind::Average => {
                            let (y0, x0) = (oy * self.stride, ox * self.stride);
                            for y in y0..y0 + self.window {
                                for x in x0..x0 + self.window {
                                    let i = grad_in.idx(y, x, c);
                                    grad_in.data[i] += g / area;
                                }
                            }
                        }
                    }
                }
            }
        }
        grad_in
    }
}

/// Fully connected layer over the flattened input; weights `[output][input]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl DenseLayer {
    pub fn new(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        DenseLayer {
            inputs,
            outputs,
            weights: uniform_init(rng, inputs * outputs, inputs),
            biases: vec![0.0; outputs],
        }
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        if input.data.len() != self.inputs {
            return Err(Error::Shape(format!(
                "dense layer over {} inputs given {}",
                self.inputs, input.shape
            )));
        }
        let data = self
            .weights
            .chunks_exact(self.inputs)
            .zip(&self.biases)
            .map(|(row, b)| b + row.iter().zip(&input.data).map(|(w, x)| w * x).sum::<f64>())
            .collect();
        Ok(Tensor {
            shape: Shape::new(1, 1, self.outputs),
            data,
        })
    }

    fn backward(&self, input: &Tensor, grad_out: &Tensor, grads: &mut LayerGrads) -> Tensor {
        let mut grad_in = Tensor::zeros(input.shape);
        for (o, &g) in grad_out.data.iter().enumerate() {
            grads.biases[o] += g;
            let row = &self.weights[o * self.inputs..][..self.inputs];
            let grow = &mut grads.weights[o * self.inputs..][..self.inputs];
            for j in 0..self.inputs {
                grow[j] += g * input.data[j];
                grad_in.data[j] += g * row[j];
            }
        }
        grad_in
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(ConvLayer),
    Relu,
    Pool(PoolLayer),
    Dense(DenseLayer),
}

impl Layer {
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv(l) => l.forward(input),
            Layer::Relu => Ok(Tensor {
                shape: input.shape,
                data: input.data.iter().map(|&x| x.max(0.0)).collect(),
            }),
            Layer::Pool(l) => l.forward(input),
            Layer::Dense(l) => l.forward(input),
        }
    }

    fn output_shape(&self, input: Shape) -> Result<Shape> {
        match self {
            Layer::Conv(l) => l.output_shape(input),
            Layer::Relu => Ok(input),
            Layer::Pool(l) => l.output_shape(input),
            Layer::Dense(l) if l.inputs == input.len() => Ok(Shape::new(1, 1, l.outputs)),
            Layer::Dense(l) => Err(Error::Shape(format!(
                "dense layer over {} inputs after shape {input}",
                l.inputs
            ))),
        }
    }

    fn params(&self) -> (&[f64], &[f64]) {
        match self {
            Layer::Conv(l) => (&l.weights, &l.biases),
            Layer::Dense(l) => (&l.weights, &l.biases),
            Layer::Relu | Layer::Pool(_) => (&[], &[]),
        }
    }

    fn params_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        match self {
            Layer::Conv(l) => (&mut l.weights, &mut l.biases),
            Layer::Dense(l) => (&mut l.weights, &mut l.biases),
            Layer::Relu | Layer::Pool(_) => (&mut [], &mut []),
        }
    }

    fn zero_grads(&self) -> LayerGrads {
        let (w, b) = self.params();
        LayerGrads {
            weights: vec![0.0; w.len()],
            biases: vec![0.0; b.len()],
        }
    }
}

/// Gradient of one layer's weights and biases (empty for parameter-free layers).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
}

impl Gradients {
    /// Flattened in the same order as [`Network::parameters`].
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|g| g.weights.iter().chain(&g.biases).copied())
            .collect()
    }

    fn add(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += y);
            a.biases.iter_mut().zip(&b.biases).for_each(|(x, y)| *x += y);
        }
    }

    fn scale(&mut self, k: f64) {
        for g in &mut self.layers {
            g.weights.iter_mut().chain(g.biases.iter_mut()).for_each(|x| *x *= k);
        }
    }
}

/// Layer stack ending in a dense layer with one logit per class.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input: Shape,
    layers: Vec<Layer>,
}

impl Network {
    pub fn new(input: Shape, layers: Vec<Layer>) -> Result<Self> {
        let mut shape = input;
        for layer in &layers {
            shape = layer.output_shape(shape)?;
        }
        match layers.last() {
            Some(Layer::Dense(d)) if d.outputs == NUM_CLASSES => {}
            _ => {
                return Err(Error::Shape(format!(
                    "network must end in a dense layer with {NUM_CLASSES} outputs"
                )))
            }
        }
        Ok(Network { input, layers })
    }

    pub fn input_shape(&self) -> Shape {
        self.input
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Output shape after every layer, starting with the input.
    pub fn shape_chain(&self) -> Vec<Shape> {
        let mut chain = vec![self.input];
        for layer in &self.layers {
            let next = layer
                .output_shape(*chain.last().expect("chain starts non-empty"))
                .expect("validated at construction");
            chain.push(next);
        }
        chain
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.shape != self.input {
            return Err(Error::Shape(format!(
                "network expects {} input, got {}",
                self.input, input.shape
            )));
        }
        Ok(())
    }

    pub fn forward(&self, input: &Tensor) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut x = input.clone();
        for layer in &self.layers {
            x = layer.forward(&x)?;
        }
        Ok(x.data)
    }

    pub fn predict(&self, input: &Tensor) -> Result<usize> {
        let logits = self.forward(input)?;
        Ok(argmax(&logits))
    }

    fn example_gradients(&self, input: &Tensor, label: usize) -> Result<(f64, Gradients)> {
        self.check_input(input)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.clone());
        for layer in &self.layers {
            let next = layer.forward(activations.last().expect("non-empty"))?;
            activations.push(next);
        }
        let logits = &activations.last().expect("non-empty").data;
        let probs = softmax(logits);
        let loss = -probs[label].ln();

        let mut grad = Tensor {
            shape: Shape::new(1, 1, NUM_CLASSES),
            data: probs,
        };
        grad.data[label] -= 1.0;
        let mut grads: Vec<LayerGrads> = self.layers.iter().map(Layer::zero_grads).collect();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &activations[i];
            grad = match layer {
                Layer::Conv(l) => l.backward(input, &grad, &mut grads[i]),
                Layer::Dense(l) => l.backward(input, &grad, &mut grads[i]),
                Layer::Pool(l) => l.backward(input, &grad),
                Layer::Relu => Tensor {
                    shape: grad.shape,
                    data: grad
                        .data
                        .iter()
                        .zip(&input.data)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect(),
                },
            };
        }
        Ok((loss, Gradients { layers: grads }))
    }

    /// Mean softmax cross-entropy over the batch and its exact gradient.
    pub fn loss_and_gradients(&self, inputs: &[Tensor], labels: &[usize]) -> Result<(f64, Gradients)> {
        if inputs.is_empty() || inputs.len() != labels.len() {
            return Err(Error::Argument(format!(
                "batch of {} inputs and {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= NUM_CLASSES) {
            return Err(Error::Argument(format!("label {l} outside 0..{NUM_CLASSES}")));
        }
        // Per-example work runs in parallel; the reduction runs in batch order.
        let per_example: Vec<(f64, Gradients)> = inputs
            .par_iter()
            .zip(labels.par_iter())
            .map(|(x, &y)| self.example_gradients(x, y))
            .collect::<Result<_>>()?;
        let mut iter = per_example.into_iter();
        let (mut loss, mut total) = iter.next().expect("batch is non-empty");
        for (l, g) in iter {
            loss += l;
            total.add(&g);
        }
        let k = 1.0 / inputs.len() as f64;
        total.scale(k);
        Ok((loss * k, total))
    }

    pub fn apply_gradients(&mut self, grads: &Gradients, learning_rate: f64) {
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            let (w, b) = layer.params_mut();
            w.iter_mut().zip(&g.weights).for_each(|(p, d)| *p -= learning_rate * d);
            b.iter_mut().zip(&g.biases).for_each(|(p, d)| *p -= learning_rate * d);
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| {
            let (w, b) = l.params();
            w.len() + b.len()
        }).sum()
    }

    /// All trainable values, layer by layer, weights before biases.
    pub fn parameters(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| {
                let (w, b) = l.params();
                w.iter().chain(b).copied()
            })
            .collect()
    }

    pub fn set_parameters(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.parameter_count() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                values.len(),
                self.parameter_count()
            )));
        }
        let mut rest = values;
        for layer in &mut self.layers {
            let (w, b) = layer.params_mut();
            let (head, tail) = rest.split_at(w.len());
            w.copy_from_slice(head);
            let (head, tail) = tail.split_at(b.len());
            b.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    /// Fraction of correctly classified examples.
    pub fn accuracy(&self, set: &LabeledSet) -> Result<f64> {
        if set.is_empty() {
            return Err(Error::Argument("accuracy of an empty set".into()));
        }
        let correct = set
            .inputs
            .par_iter()
            .zip(set.labels.par_iter())
            .map(|(x, &y)| self.predict(x).map(|p| usize::from(p == y)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .sum::<usize>();
        Ok(correct as f64 / set.len() as f64)
    }

    /// Mean cross-entropy over a set.
    pub fn mean_loss(&self, set: &LabeledSet) -> Result<f64> {
        if set.is_empty() {
            return Err(Error::Argument("loss of an empty set".into()));
        }
        let losses = set
            .inputs
            .par_iter()
            .zip(set.labels.par_iter())
            .map(|(x, &y)| self.forward(x).map(|logits| -softmax(&logits)[y].ln()))
            .collect::<Result<Vec<_>>>()?;
        Ok(losses.iter().sum::<f64>() / set.len() as f64)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// CONV(5@5×5) → ReLU → avg-POOL(5×5, s2) → CONV(12@3×3) → ReLU →
/// max-POOL(2×2, s2) → FC(4) on a 28×28×4 patch.
pub fn reference_cnn(seed: u64) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = vec![
        Layer::Conv(ConvLayer::new(5, 5, 4, 1, &mut rng)),
        Layer::Relu,
        Layer::Pool(PoolLayer {
            kind: PoolKind::Average,
            window: 5,
            stride: 2,
        }),
        Layer::Conv(ConvLayer::new(12, 3, 5, 1, &mut rng)),
        Layer::Relu,
        Layer::Pool(PoolLayer {
            kind: PoolKind::Max,
            window: 2,
            stride: 2,
        }),
        Layer::Dense(DenseLayer::new(4 * 4 * 12, NUM_CLASSES, &mut rng)),
    ];
    Network::new(Shape::new(28, 28, 4), layers).expect("reference CNN shapes compose")
}

/// The CNN with its first convolution and pooling replaced by a frozen
/// quanvolutional feature map of shape `features`.
pub fn reference_qnn(seed: u64, features: Shape) -> Result<Network> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let conv = ConvLayer::new(12, 3, features.channels, 1, &mut rng);
    let conv_out = conv.output_shape(features)?;
    let pool = PoolLayer {
        kind: PoolKind::Max,
        window: 2,
        stride: 2,
    };
    let pool_out = pool.output_shape(conv_out)?;
    let layers = vec![
        Layer::Conv(conv),
        Layer::Relu,
        Layer::Pool(pool),
        Layer::Dense(DenseLayer::new(pool_out.len(), NUM_CLASSES, &mut rng)),
    ];
    Network::new(features, layers)
}

/// Inputs with class labels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledSet {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn new(inputs: Vec<Tensor>, labels: Vec<usize>) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} inputs with {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        Ok(LabeledSet { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Evaluate after this many SGD steps (and always after the last one).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            epochs: 50,
            batch_size: 32,
            seed: 0,
            eval_every: 50,
        }
    }
}

/// Metrics at one evaluation point. `iteration` counts SGD steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub iteration: usize,
    pub train_loss: f64,
    pub test_accuracy: f64,
}

/// Mini-batch SGD with a seeded per-epoch shuffle. Emits a row before the
/// first step, every `eval_every` steps, and after the final step.
pub fn train(net: &mut Network, train_set: &LabeledSet, test_set: &LabeledSet, config: &TrainConfig) -> Result<Vec<MetricRow>> {
    if train_set.is_empty() || test_set.is_empty() {
        return Err(Error::Argument("training needs non-empty train and test sets".into()));
    }
    if !(config.learning_rate >= 0.0 && config.learning_rate.is_finite()) {
        return Err(Error::Argument(format!("learning rate {}", config.learning_rate)));
    }
    if config.batch_size == 0 || config.eval_every == 0 {
        return Err(Error::Argument("batch size and evaluation interval must be positive".into()));
    }
    let evaluate = |net: &Network, iteration: usize| -> Result<MetricRow> {
        Ok(MetricRow {
            iteration,
            train_loss: net.mean_loss(train_set)?,
            test_accuracy: net.accuracy(test_set)?,
        })
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut rows = vec![evaluate(net, 0)?];
    let mut step = 0;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let inputs: Vec<Tensor> = batch.iter().map(|&i| train_set.inputs[i].clone()).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| train_set.labels[i]).collect();
            let (_, grads) = net.loss_and_gradients(&inputs, &labels)?;
            net.apply_gradients(&grads, config.learning_rate);
            step += 1;
            if step % config.eval_every == 0 {
                rows.push(evaluate(net, step)?);
            }
        }
    }
    if rows.last().map(|r| r.iteration) != Some(step) {
        rows.push(evaluate(net, step)?);
    }
    Ok(rows)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"QNNCKPT\0";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes a checkpoint.
///
/// Layout (little endian): magic `QNNCKPT\0`, `u32` version (1), input
/// height/width/channels as `u32`, `u32` layer count, one record per layer
/// (`u8` tag then `u32` fields: conv `0, filters, kernel, in_channels,
/// stride`; relu `1`; pool `2, kind (0 avg, 1 max), window, stride`; dense
/// `3, inputs, outputs`), `u64` parameter count, then the parameters as
/// `f64` in [`Network::parameters`] order.
pub fn write_checkpoint<W: Write>(mut w: W, net: &Network) -> std::io::Result<()> {
    let u32s = |w: &mut W, vals: &[usize]| -> std::io::Result<()> {
        for &v in vals {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        Ok(())
    };
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    u32s(&mut w, &[net.input.height, net.input.width, net.input.channels, net.layers.len()])?;
    for layer in &net.layers {
        match layer {
            Layer::Conv(l) => {
                w.write_all(&[0])?;
                u32s(&mut w, &[l.filters, l.kernel, l.in_channels, l.stride])?;
            }
            Layer::Relu => w.write_all(&[1])?,
            Layer::Pool(l) => {
                w.write_all(&[2])?;
                let kind = match l.kind {
                    PoolKind::Average => 0,
                    PoolKind::Max => 1,
                };
                u32s(&mut w, &[kind, l.window, l.stride])?;
            }
            Layer::Dense(l) => {
                w.write_all(&[3])?;
                u32s(&mut w, &[l.inputs, l.outputs])?;
            }
        }
    }
    let params = net.parameters();
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for p in params {
        w.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Network> {
    let bad = |m: &str| Error::Validation(format!("checkpoint: {m}"));
    let io = |e| Error::io("<checkpoint>", e);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let mut u32_buf = [0u8; 4];
    let mut read_u32 = |r: &mut R| -> Result<usize> {
        r.read_exact(&mut u32_buf).map_err(io)?;
        Ok(u32::from_le_bytes(u32_buf) as usize)
    };
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let input = Shape::new(read_u32(&mut r)?, read_u32(&mut r)?, read_u32(&mut r)?);
    let count = read_u32(&mut r)?;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag).map_err(io)?;
        layers.push(match tag[0] {
            0 => {
                let (filters, kernel, in_channels, stride) =
                    (read_u32(&mut r)?, read_u32(&mut r)?, read_u32(&mut r)?, read_u32(&mut r)?);
                Layer::Conv(ConvLayer {
                    filters,
                    kernel,
                    in_channels,
                    stride,
                    weights: vec![0.0; filters * kernel * kernel * in_channels],
                    biases: vec![0.0; filters],
                })
            }
            1 => Layer::Relu,
            2 => {
                let kind = match read_u32(&mut r)? {
                    0 => PoolKind::Average,
                    1 => PoolKind::Max,
                    k => return Err(bad(&format!("pool kind {k}"))),
                };
                Layer::Pool(PoolLayer {
                    kind,
                    window: read_u32(&mut r)?,
                    stride: read_u32(&mut r)?,
                })
            }
            3 => {
                let (inputs, outputs) = (read_u32(&mut r)?, read_u32(&mut r)?);
                Layer::Dense(DenseLayer {
                    inputs,
                    outputs,
                    weights: vec![0.0; inputs * outputs],
                    biases: vec![0.0; outputs],
                })
            }
            t => return Err(bad(&format!("layer tag {t}"))),
        });
    }
    let mut net = Network::new(input, layers)?;
    let mut u64_buf = [0u8; 8];
    r.read_exact(&mut u64_buf).map_err(io)?;
    let n = u64::from_le_bytes(u64_buf) as usize;
    if n != net.parameter_count() {
        return Err(bad(&format!("{n} parameters for {} slots", net.parameter_count())));
    }
    let mut params = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut u64_buf).map_err(io)?;
        params.push(f64::from_le_bytes(u64_buf));
    }
    net.set_parameters(&params)?;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_tensor(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor {
        Tensor::new(shape, (0..shape.len()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_convolution() {
        let conv = ConvLayer {
            filters: 1,
            kernel: 1,
            in_channels: 1,
            stride: 1,
            weights: vec![1.0],
            biases: vec![0.0],
        };
        let x = random_tensor(&mut rng(1), Shape::new(4, 3, 1));
        assert_eq!(conv.forward(&x).unwrap(), x);
    }

    #[test]
    fn convolution_shapes_and_bias() {
        let conv = ConvLayer::new(5, 5, 4, 1, &mut rng(2));
        let x = random_tensor(&mut rng(3), Shape::new(28, 28, 4));
        assert_eq!(conv.forward(&x).unwrap().shape(), Shape::new(24, 24, 5));

        let flat = ConvLayer {
            weights: vec![0.0; conv.weights.len()],
            biases: vec![0.7; 5],
            ..conv.clone()
        };
        assert!(flat.forward(&x).unwrap().data().iter().all(|&v| v == 0.7));

        let tiny = Tensor::zeros(Shape::new(4, 4, 4));
        assert!(matches!(conv.forward(&tiny), Err(Error::Shape(_))));
    }

    #[test]
    fn convolution_matches_direct_sum() {
        let conv = ConvLayer::new(2, 3, 2, 2, &mut rng(4));
        let x = random_tensor(&mut rng(5), Shape::new(7, 7, 2));
        let y = conv.forward(&x).unwrap();
        assert_eq!(y.shape(), Shape::new(3, 3, 2));
        let (oy, ox, f) = (1, 2, 1);
        let mut expected = conv.biases[f];
        for ky in 0..3 {
            for kx in 0..3 {
                for c in 0..2 {
                    expected += conv.weights[((f * 3 + ky) * 3 + kx) * 2 + c] * x.get(oy * 2 + ky, ox * 2 + kx, c);
                }
            }
        }
        assert!((y.get(oy, ox, f) - expected).abs() < 1e-12);
    }

    #[test]
    fn pooling_examples() {
        for kind in [PoolKind::Average, PoolKind::Max] {
            let pool = PoolLayer { kind, window: 2, stride: 1 };
            let x = Tensor::new(Shape::new(3, 3, 1), vec![0.25; 9]).unwrap();
            assert!(pool.forward(&x).unwrap().data().iter().all(|&v| v == 0.25));
        }
        let max = PoolLayer { kind: PoolKind::Max, window: 2, stride: 2 };
        let x = Tensor::new(Shape::new(2, 2, 1), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(max.forward(&x).unwrap().data(), &[4.0]);

        let avg = PoolLayer { kind: PoolKind::Average, window: 5, stride: 2 };
        assert_eq!(
            avg.forward(&Tensor::zeros(Shape::new(24, 24, 5))).unwrap().shape(),
            Shape::new(10, 10, 5)
        );
        assert!(avg.forward(&Tensor::zeros(Shape::new(4, 4, 1))).is_err());
    }

    #[test]
    fn max_pool_routes_to_first_maximum() {
        let max = PoolLayer { kind: PoolKind::Max, window: 2, stride: 2 };
        let x = Tensor::new(Shape::new(2, 2, 1), vec![3.0, 1.0, 3.0, 3.0]).unwrap();
        let g = Tensor::new(Shape::new(1, 1, 1), vec![1.0]).unwrap();
        assert_eq!(max.backward(&x, &g).data(), &[1.0, 0.0, 0.0, 0.0]);
        let x = Tensor::new(Shape::new(2, 2, 1), vec![0.0, 1.0, 5.0, 5.0]).unwrap();
        assert_eq!(max.backward(&x, &g).data(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn reference_shape_chains() {
        let cnn = reference_cnn(1);
        let chain: Vec<Shape> = cnn
            .shape_chain()
            .into_iter()
            .enumerate()
            .filter(|(i, _)| !matches!(cnn.layers().get(i.wrapping_sub(1)), Some(Layer::Relu)))
            .map(|(_, s)| s)
            .collect();
        assert_eq!(
            chain,
            vec![
                Shape::new(28, 28, 4),
                Shape::new(24, 24, 5),
                Shape::new(10, 10, 5),
                Shape::new(8, 8, 12),
                Shape::new(4, 4, 12),
                Shape::new(1, 1, 4),
            ]
        );
        let qnn = reference_qnn(1, Shape::new(5, 5, 5)).unwrap();
        let shapes = qnn.shape_chain();
        assert_eq!(shapes[1], Shape::new(3, 3, 12));
        assert_eq!(shapes[3], Shape::new(1, 1, 12));
        assert_eq!(shapes[4], Shape::new(1, 1, 4));

        let other = reference_cnn(2);
        assert_ne!(cnn.parameters(), other.parameters());
        assert_eq!(cnn.shape_chain(), other.shape_chain());
    }

    #[test]
    fn feature_maps_are_centered() {
        let map = FeatureMap::new(1, 1, 3, vec![0.0, 0.5, 1.0]).unwrap();
        let t = Tensor::from(&map);
        assert_eq!(t.shape(), Shape::new(1, 1, 3));
        assert_eq!(t.data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn zero_network_emits_biases() {
        let mut net = reference_cnn(3);
        let mut params = vec![0.0; net.parameter_count()];
        let n = params.len();
        params[n - 4..].copy_from_slice(&[0.1, -0.2, 0.3, 0.4]);
        net.set_parameters(&params).unwrap();
        let logits = net.forward(&Tensor::zeros(Shape::new(28, 28, 4))).unwrap();
        assert_eq!(logits, vec![0.1, -0.2, 0.3, 0.4]);
        assert!(net.forward(&Tensor::zeros(Shape::new(5, 5, 5))).is_err());
    }

    #[test]
    fn uniform_logits_cost_ln4() {
        let mut net = reference_qnn(0, Shape::new(5, 5, 5)).unwrap();
        net.set_parameters(&vec![0.0; net.parameter_count()]).unwrap();
        let x = vec![Tensor::zeros(Shape::new(5, 5, 5)); 3];
        let (loss, _) = net.loss_and_gradients(&x, &[0, 2, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!(matches!(net.loss_and_gradients(&x, &[0, 1, 4]), Err(Error::Argument(_))));
    }

    #[test]
    fn duplicated_batch_has_same_loss() {
        let net = reference_qnn(5, Shape::new(5, 5, 3)).unwrap();
        let mut r = rng(6);
        let x: Vec<Tensor> = (0..4).map(|_| random_tensor(&mut r, Shape::new(5, 5, 3))).collect();
        let y = vec![0, 1, 2, 3];
        let (single, g1) = net.loss_and_gradients(&x, &y).unwrap();
        let xx: Vec<Tensor> = x.iter().chain(&x).cloned().collect();
        let yy: Vec<usize> = y.iter().chain(&y).copied().collect();
        let (double, g2) = net.loss_and_gradients(&xx, &yy).unwrap();
        assert!((single - double).abs() < 1e-12);
        for (a, b) in g1.flatten().iter().zip(g2.flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = reference_cnn(9);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &net).unwrap();
        assert_eq!(&buf[..8], b"QNNCKPT\0");
        assert_eq!(read_checkpoint(buf.as_slice()).unwrap(), net);
        buf[8] = 7;
        assert!(read_checkpoint(buf.as_slice()).is_err());
    }

    #[test]
    fn train_rejects_empty_sets() {
        let mut net = reference_qnn(0, Shape::new(5, 5, 1)).unwrap();
        let set = LabeledSet::new(vec![Tensor::zeros(Shape::new(5, 5, 1))], vec![0]).unwrap();
        let cfg = TrainConfig::default();
        assert!(train(&mut net, &LabeledSet::default(), &set, &cfg).is_err());
        assert!(train(&mut net, &set, &LabeledSet::default(), &cfg).is_err());
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(logits in prop::collection::vec(-50.0..50.0f64, 4)) {
            let p = softmax(&logits);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&v| v >= 0.0 && -v.ln() >= 0.0));
        }

        #[test]
        fn window_shape_algebra(side in 1usize..40, k in 1usize..8, s in 1usize..5) {
            prop_assume!(k <= side);
            let conv = ConvLayer::new(1, k, 1, s, &mut rng(0));
            let out = conv.forward(&Tensor::zeros(Shape::new(side, side, 1))).unwrap();
            prop_assert_eq!(out.shape().height, (side - k) / s + 1);
            let pool = PoolLayer { kind: PoolKind::Max, window: k, stride: s };
            let out = pool.forward(&Tensor::zeros(Shape::new(side, side, 2))).unwrap();
            prop_assert_eq!(out.shape(), Shape::new((side - k) / s + 1, (side - k) / s + 1, 2));
        }
    }
}
