//! Dense feed-forward classifier: inference, loss gradients, Jacobians and
//! plain mini-batch SGD.
//!
//! Hidden layers use ReLU, the last layer is linear and its logits go
//! through a max-shifted softmax. A *neuron* is one output unit of a layer:
//! one weight row plus its bias. The mutation operators edit exactly those.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }

    #[inline]
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// One fully-connected layer. Weights are stored row-major, one row per
/// output unit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LayerRepr", into = "LayerRepr")]
pub struct DenseLayer {
    in_dim: usize,
    out_dim: usize,
    weights: Vec<f64>,
    biases: Vec<f64>,
    activation: Activation,
}

impl DenseLayer {
    pub fn new(
        in_dim: usize,
        out_dim: usize,
        weights: Vec<f64>,
        biases: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::Network(format!(
                "layer dimensions must be positive, got {out_dim}x{in_dim}"
            )));
        }
        if weights.len() != in_dim * out_dim {
            return Err(Error::Network(format!(
                "weight buffer has {} values, expected {out_dim}x{in_dim}",
                weights.len()
            )));
        }
        if biases.len() != out_dim {
            return Err(Error::Network(format!(
                "{out_dim} weight rows but {} biases",
                biases.len()
            )));
        }
        if weights.iter().chain(&biases).any(|v| !v.is_finite()) {
            return Err(Error::Network("non-finite parameter".into()));
        }
        Ok(Self {
            in_dim,
            out_dim,
            weights,
            biases,
            activation,
        })
    }

    /// Builds a layer from nested rows.
    pub fn from_rows(rows: Vec<Vec<f64>>, biases: Vec<f64>, activation: Activation) -> Result<Self> {
        let out_dim = rows.len();
        let in_dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != in_dim) {
            return Err(Error::Network("ragged weight rows".into()));
        }
        let weights = rows.into_iter().flatten().collect();
        Self::new(in_dim, out_dim, weights, biases, activation)
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    pub fn row(&self, neuron: usize) -> &[f64] {
        &self.weights[neuron * self.in_dim..(neuron + 1) * self.in_dim]
    }

    // Mutable access stays crate-internal so every public constructor path
    // re-validates finiteness.
    pub(crate) fn row_mut(&mut self, neuron: usize) -> &mut [f64] {
        &mut self.weights[neuron * self.in_dim..(neuron + 1) * self.in_dim]
    }

    pub(crate) fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub(crate) fn biases_mut(&mut self) -> &mut [f64] {
        &mut self.biases
    }

    fn affine_into(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.weights
                .chunks_exact(self.in_dim)
                .zip(&self.biases)
                .map(|(row, b)| dot(row, input) + b),
        );
    }
}

#[derive(Serialize, Deserialize)]
struct LayerRepr {
    activation: Activation,
    weights: Vec<Vec<f64>>,
    biases: Vec<f64>,
}

impl TryFrom<LayerRepr> for DenseLayer {
    type Error = Error;

    fn try_from(repr: LayerRepr) -> Result<Self> {
        DenseLayer::from_rows(repr.weights, repr.biases, repr.activation)
    }
}

impl From<DenseLayer> for LayerRepr {
    fn from(layer: DenseLayer) -> Self {
        LayerRepr {
            activation: layer.activation,
            weights: layer
                .weights
                .chunks_exact(layer.in_dim)
                .map(<[f64]>::to_vec)
                .collect(),
            biases: layer.biases,
        }
    }
}

/// A layered dense classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NetworkRepr", into = "NetworkRepr")]
pub struct Network {
    input_dim: usize,
    num_classes: usize,
    layers: Vec<DenseLayer>,
}

#[derive(Serialize, Deserialize)]
struct NetworkRepr {
    input_dim: usize,
    num_classes: usize,
    layers: Vec<DenseLayer>,
}

impl TryFrom<NetworkRepr> for Network {
    type Error = Error;

    fn try_from(repr: NetworkRepr) -> Result<Self> {
        let net = Network::new(repr.layers)?;
        if net.input_dim != repr.input_dim || net.num_classes != repr.num_classes {
            return Err(Error::Network(format!(
                "header says {}->{} but layers give {}->{}",
                repr.input_dim, repr.num_classes, net.input_dim, net.num_classes
            )));
        }
        Ok(net)
    }
}

impl From<Network> for NetworkRepr {
    fn from(net: Network) -> Self {
        NetworkRepr {
            input_dim: net.input_dim,
            num_classes: net.num_classes,
            layers: net.layers,
        }
    }
}

impl Network {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        let (first, last) = match (layers.first(), layers.last()) {
            (Some(f), Some(l)) => (f, l),
            _ => return Err(Error::Network("network has no layers".into())),
        };
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::Network(format!(
                    "layer {k} outputs {} values but layer {} takes {}",
                    pair[0].out_dim,
                    k + 1,
                    pair[1].in_dim
                )));
            }
        }
        Ok(Self {
            input_dim: first.in_dim,
            num_classes: last.out_dim,
            layers,
        })
    }

    /// Glorot-uniform initialized MLP. `sizes` lists every width including
    /// input and output, e.g. `[784, 128, 10]`.
    pub fn mlp(sizes: &[usize], seed: u64) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::Argument(
                "an MLP needs at least input and output sizes".into(),
            ));
        }
        let mut rng = seed::rng(seed);
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for (k, w) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let weights = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-limit..=limit))
                .collect();
            let activation = if k + 2 == sizes.len() {
                Activation::Identity
            } else {
                Activation::Relu
            };
            layers.push(DenseLayer::new(
                fan_in,
                fan_out,
                weights,
                vec![0.0; fan_out],
                activation,
            )?);
        }
        Network::new(layers)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    /// Total number of trainable scalars (weights and biases).
    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::InputShape {
                expected: self.input_dim,
                found: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("input contains non-finite values".into()));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardTrace> {
        self.check_input(x)?;
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut post_activations: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let input = post_activations.last().map_or(x, Vec::as_slice);
            let mut pre = Vec::with_capacity(layer.out_dim);
            layer.affine_into(input, &mut pre);
            let post = pre.iter().map(|&v| layer.activation.apply(v)).collect();
            pre_activations.push(pre);
            post_activations.push(post);
        }
        let logits = post_activations.last().cloned().unwrap_or_default();
        let probabilities = softmax(&logits);
        Ok(ForwardTrace {
            pre_activations,
            post_activations,
            logits,
            probabilities,
        })
    }

    /// Softmax probabilities without keeping the per-layer intermediates.
    pub fn probabilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut current = x.to_vec();
        let mut next = Vec::new();
        for layer in &self.layers {
            layer.affine_into(&current, &mut next);
            for v in next.iter_mut() {
                *v = layer.activation.apply(*v);
            }
            std::mem::swap(&mut current, &mut next);
        }
        Ok(softmax(&current))
    }

    /// Argmax of the softmax output; ties go to the lowest class index.
    pub fn predict_label(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.probabilities(x)?))
    }

    /// Softmax cross-entropy `−log p[label]` and its exact gradients with
    /// respect to every parameter and to the input.
    pub fn loss_and_gradients(&self, x: &[f64], label: usize) -> Result<Gradients> {
        if label >= self.num_classes {
            return Err(Error::Argument(format!(
                "label {label} out of range for {} classes",
                self.num_classes
            )));
        }
        let trace = self.forward(x)?;
        let loss = log_sum_exp(&trace.logits) - trace.logits[label];
        let mut delta = trace.probabilities.clone();
        delta[label] -= 1.0;
        let (layers, input) = self.backward(x, &trace, delta, true);
        Ok(Gradients {
            loss,
            layers,
            input,
        })
    }

    /// Jacobian of the softmax outputs with respect to the input:
    /// row `k` is `∂p_k/∂x`.
    pub fn class_jacobian(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        let trace = self.forward(x)?;
        let p = &trace.probabilities;
        Ok((0..self.num_classes)
            .map(|k| {
                // ∂p_k/∂z_j = p_k (1[j = k] − p_j)
                let delta = p
                    .iter()
                    .enumerate()
                    .map(|(j, &pj)| p[k] * (if j == k { 1.0 } else { 0.0 } - pj))
                    .collect();
                self.backward(x, &trace, delta, false).1
            })
            .collect())
    }

    /// Propagates `delta = ∂L/∂logits` back through the network. Returns the
    /// parameter gradients (empty unless requested) and `∂L/∂x`.
    fn backward(
        &self,
        x: &[f64],
        trace: &ForwardTrace,
        mut delta: Vec<f64>,
        want_params: bool,
    ) -> (Vec<LayerGradient>, Vec<f64>) {
        let mut grads = Vec::new();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            // delta currently holds ∂L/∂post_k; fold in the activation.
            for (d, &pre) in delta.iter_mut().zip(&trace.pre_activations[k]) {
                *d *= layer.activation.derivative(pre);
            }
            let input = if k == 0 {
                x
            } else {
                trace.post_activations[k - 1].as_slice()
            };
            if want_params {
                let mut weights = Vec::with_capacity(layer.weights.len());
                for &d in &delta {
                    weights.extend(input.iter().map(|&a| d * a));
                }
                grads.push(LayerGradient {
                    weights,
                    biases: delta.clone(),
                });
            }
            let mut upstream = vec![0.0; layer.in_dim];
            for (row, &d) in layer.weights.chunks_exact(layer.in_dim).zip(&delta) {
                if d != 0.0 {
                    for (u, &w) in upstream.iter_mut().zip(row) {
                        *u += d * w;
                    }
                }
            }
            delta = upstream;
        }
        grads.reverse();
        (grads, delta)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("network serialization cannot fail")
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::json(path, e))
    }
}

/// Cached intermediates of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub pre_activations: Vec<Vec<f64>>,
    pub post_activations: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGradient {
    /// Row-major, same layout as [`DenseLayer::weights`].
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub loss: f64,
    pub layers: Vec<LayerGradient>,
    pub input: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

/// Mini-batch SGD on softmax cross-entropy. The sample order is reshuffled
/// every epoch from `cfg.seed`, so identical inputs give bit-identical
/// networks.
pub fn train_sgd(
    net: &Network,
    data: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<(Network, Vec<EpochStats>)> {
    if data.is_empty() {
        return Err(Error::Argument("cannot train on an empty dataset".into()));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Argument(
            "epochs and batch size must be positive".into(),
        ));
    }
    if !(cfg.learning_rate >= 0.0 && cfg.learning_rate.is_finite()) {
        return Err(Error::Argument(format!(
            "learning rate must be finite and non-negative, got {}",
            cfg.learning_rate
        )));
    }
    check_compatible(net, data)?;

    let mut net = net.clone();
    let mut rng = seed::rng(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Option<Vec<LayerGradient>> = None;
            for &i in batch {
                let sample = &data.samples()[i];
                let grads = net.loss_and_gradients(&sample.features, sample.label)?;
                total_loss += grads.loss;
                match acc.as_mut() {
                    None => acc = Some(grads.layers),
                    Some(sum) => {
                        for (s, g) in sum.iter_mut().zip(&grads.layers) {
                            add_assign(&mut s.weights, &g.weights);
                            add_assign(&mut s.biases, &g.biases);
                        }
                    }
                }
            }
            if cfg.learning_rate == 0.0 {
                continue;
            }
            let step = cfg.learning_rate / batch.len() as f64;
            if let Some(sum) = acc {
                for (layer, g) in net.layers.iter_mut().zip(&sum) {
                    for (w, gw) in layer.weights.iter_mut().zip(&g.weights) {
                        *w -= step * gw;
                    }
                    for (b, gb) in layer.biases.iter_mut().zip(&g.biases) {
                        *b -= step * gb;
                    }
                }
            }
        }
        if net
            .layers
            .iter()
            .any(|l| l.weights.iter().chain(&l.biases).any(|v| !v.is_finite()))
        {
            return Err(Error::Argument(format!(
                "training diverged in epoch {epoch}; lower the learning rate"
            )));
        }
        log.push(EpochStats {
            epoch,
            mean_loss: total_loss / data.len() as f64,
            train_accuracy: accuracy(&net, data)?,
            test_accuracy: test.map(|t| accuracy(&net, t)).transpose()?,
        });
    }
    Ok((net, log))
}

/// Fraction of samples whose predicted label equals the ground truth.
pub fn accuracy(net: &Network, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Argument(
            "accuracy of an empty dataset is undefined".into(),
        ));
    }
    check_compatible(net, data)?;
    let correct = data
        .samples()
        .par_iter()
        .map(|s| net.predict_label(&s.features).map(|p| usize::from(p == s.label)))
        .try_reduce(|| 0, |a, b| Ok(a + b))?;
    Ok(correct as f64 / data.len() as f64)
}

fn check_compatible(net: &Network, data: &Dataset) -> Result<()> {
    if data.input_dim() != net.input_dim() {
        return Err(Error::InputShape {
            expected: net.input_dim(),
            found: data.input_dim(),
        });
    }
    if data.num_classes() > net.num_classes() {
        return Err(Error::Argument(format!(
            "dataset has {} classes but the network only {}",
            data.num_classes(),
            net.num_classes()
        )));
    }
    Ok(())
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln()
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_assign(acc: &mut [f64], other: &[f64]) {
    for (a, b) in acc.iter_mut().zip(other) {
        *a += b;
    }
}
