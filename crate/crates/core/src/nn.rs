//! Feedforward classifier: initialisation, SGD, inference, attack features
//! and weight perturbation.

use std::collections::BTreeSet;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

impl FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(format!("unknown activation `{other}`")),
        }
    }
}

/// Multilayer perceptron. `weights[l]` is a row-major
/// `layer_sizes[l + 1] x layer_sizes[l]` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layer_sizes: Vec<usize>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    activation: Activation,
    seed: u64,
}

/// Per-input outputs used by the attack and MI pipelines.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub logits: Vec<f64>,
    pub softmax: Vec<f64>,
    /// Input to the last layer (the last hidden activation).
    pub penultimate: Vec<f64>,
    /// Cross-entropy at the supplied label.
    pub loss: Option<f64>,
    /// d loss / d W_last, row-major `num_classes x h_last`.
    pub loss_grad_last: Option<Vec<f64>>,
}

/// Parameter gradients with the same layout as the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    /// Flattened in [`MlpModel::params`] order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMode {
    Blackbox,
    Whitebox,
}

impl FromStr for FeatureMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "blackbox" => Ok(FeatureMode::Blackbox),
            "whitebox" => Ok(FeatureMode::Whitebox),
            other => Err(format!("unknown feature mode `{other}`")),
        }
    }
}

impl std::fmt::Display for FeatureMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FeatureMode::Blackbox => "blackbox",
            FeatureMode::Whitebox => "whitebox",
        })
    }
}

struct Trace {
    /// Layer inputs: `inputs[0]` is x, `inputs[l]` the activation feeding layer l.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of hidden layers.
    pre: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

impl MlpModel {
    /// Weights ~ N(0, 1/fan_in), biases zero.
    pub fn init(layer_sizes: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::invalid("an MLP needs at least an input and an output layer"));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::invalid("layer sizes must be at least 1"));
        }
        let mut rng = rng::seeded(seed);
        let mut weights = Vec::with_capacity(layer_sizes.len() - 1);
        let mut biases = Vec::with_capacity(layer_sizes.len() - 1);
        for pair in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let dist = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive std");
            weights.push((0..fan_in * fan_out).map(|_| dist.sample(&mut rng)).collect());
            biases.push(vec![0.0; fan_out]);
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
            activation,
            seed,
        })
    }

    /// Builds a model from explicit parameters, validating shapes.
    pub fn from_parts(
        layer_sizes: Vec<usize>,
        weights: Vec<Vec<f64>>,
        biases: Vec<Vec<f64>>,
        activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::Checkpoint("layer sizes must have >= 2 entries, all >= 1".into()));
        }
        let layers = layer_sizes.len() - 1;
        if weights.len() != layers || biases.len() != layers {
            return Err(Error::Checkpoint(format!(
                "expected {layers} weight and bias arrays, got {} and {}",
                weights.len(),
                biases.len()
            )));
        }
        for (l, pair) in layer_sizes.windows(2).enumerate() {
            if weights[l].len() != pair[0] * pair[1] {
                return Err(Error::Checkpoint(format!(
                    "layer {l}: weight array has {} entries, expected {}x{}",
                    weights[l].len(),
                    pair[1],
                    pair[0]
                )));
            }
            if biases[l].len() != pair[1] {
                return Err(Error::Checkpoint(format!(
                    "layer {l}: bias array has {} entries, expected {}",
                    biases[l].len(),
                    pair[1]
                )));
            }
        }
        if weights.iter().chain(&biases).flatten().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint("parameters must be finite".into()));
        }
        Ok(Self {
            layer_sizes,
            weights,
            biases,
            activation,
            seed,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Width of the layer feeding the output layer.
    pub fn penultimate_dim(&self) -> usize {
        self.layer_sizes[self.layer_sizes.len() - 2]
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().chain(&self.biases).map(Vec::len).sum()
    }

    /// All parameters flattened as `[W_0, b_0, W_1, b_1, ...]`.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                expected: self.num_params(),
                got: params.len(),
            });
        }
        let mut offset = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let (wn, bn) = (w.len(), b.len());
            w.copy_from_slice(&params[offset..offset + wn]);
            offset += wn;
            b.copy_from_slice(&params[offset..offset + bn]);
            offset += bn;
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    fn trace(&self, x: &[f64]) -> Trace {
        let layers = self.weights.len();
        let mut inputs = Vec::with_capacity(layers);
        let mut pre = Vec::with_capacity(layers - 1);
        let mut current = x.to_vec();
        for l in 0..layers {
            let fan_in = self.layer_sizes[l];
            let z: Vec<f64> = self.weights[l]
                .chunks_exact(fan_in)
                .zip(&self.biases[l])
                .map(|(row, b)| dot(row, &current) + b)
                .collect();
            inputs.push(current);
            if l + 1 == layers {
                return Trace {
                    inputs,
                    pre,
                    logits: z,
                };
            }
            current = z.iter().map(|&v| self.activation.apply(v)).collect();
            pre.push(z);
        }
        unreachable!("at least one layer")
    }

    pub fn forward(&self, x: &[f64], label: Option<usize>) -> Result<ModelOutput> {
        self.check_input(x)?;
        if let Some(y) = label {
            if y >= self.num_classes() {
                return Err(Error::invalid(format!(
                    "label {y} out of range for {} classes",
                    self.num_classes()
                )));
            }
        }
        let mut trace = self.trace(x);
        let (softmax, log_softmax) = softmax_with_log(&trace.logits);
        let penultimate = trace.inputs.pop().unwrap();
        let (loss, loss_grad_last) = match label {
            Some(y) => {
                let mut grad = Vec::with_capacity(softmax.len() * penultimate.len());
                for (c, &p) in softmax.iter().enumerate() {
                    let delta = p - if c == y { 1.0 } else { 0.0 };
                    grad.extend(penultimate.iter().map(|h| delta * h));
                }
                (Some(-log_softmax[y]), Some(grad))
            }
            None => (None, None),
        };
        Ok(ModelOutput {
            logits: trace.logits,
            softmax,
            penultimate,
            loss,
            loss_grad_last,
        })
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        self.check_input(x)?;
        let logits = self.trace(x).logits;
        Ok(argmax(&logits))
    }

    /// Fraction of `positions` in `data` classified correctly.
    pub fn accuracy(&self, data: &LabeledDataset, positions: &[usize]) -> Result<f64> {
        if positions.is_empty() {
            return Err(Error::invalid("accuracy over an empty set"));
        }
        let mut correct = 0usize;
        for &i in positions {
            if self.predict(data.row(i))? == data.label(i) {
                correct += 1;
            }
        }
        Ok(correct as f64 / positions.len() as f64)
    }

    /// Mean cross-entropy over the batch plus `(l2 / 2) * sum ||W||^2`, and
    /// its exact gradient with respect to every parameter.
    pub fn loss_and_grad(&self, xs: &[&[f64]], labels: &[usize], l2: f64) -> Result<(f64, Gradients)> {
        if xs.is_empty() || xs.len() != labels.len() {
            return Err(Error::invalid("batch must be nonempty with one label per row"));
        }
        let layers = self.weights.len();
        let mut grads = Gradients {
            weights: self.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: self.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        };
        let mut total = 0.0;
        for (x, &y) in xs.iter().zip(labels) {
            self.check_input(x)?;
            if y >= self.num_classes() {
                return Err(Error::invalid(format!("label {y} out of range")));
            }
            let trace = self.trace(x);
            let (p, logp) = softmax_with_log(&trace.logits);
            total -= logp[y];
            let mut delta: Vec<f64> = p;
            delta[y] -= 1.0;
            for l in (0..layers).rev() {
                let input = &trace.inputs[l];
                let fan_in = input.len();
                for (r, &d) in delta.iter().enumerate() {
                    let row = &mut grads.weights[l][r * fan_in..(r + 1) * fan_in];
                    for (g, &a) in row.iter_mut().zip(input) {
                        *g += d * a;
                    }
                    grads.biases[l][r] += d;
                }
                if l > 0 {
                    let z = &trace.pre[l - 1];
                    let mut back = vec![0.0; fan_in];
                    for (r, &d) in delta.iter().enumerate() {
                        let row = &self.weights[l][r * fan_in..(r + 1) * fan_in];
                        for (b, &w) in back.iter_mut().zip(row) {
                            *b += w * d;
                        }
                    }
                    delta = back
                        .iter()
                        .zip(z.iter().zip(input))
                        .map(|(&b, (&zv, &av))| b * self.activation.derivative(zv, av))
                        .collect();
                }
            }
        }
        let scale = 1.0 / xs.len() as f64;
        let mut reg = 0.0;
        for (gw, w) in grads.weights.iter_mut().zip(&self.weights) {
            for (g, &v) in gw.iter_mut().zip(w) {
                *g = *g * scale + l2 * v;
                reg += v * v;
            }
        }
        for gb in grads.biases.iter_mut() {
            for g in gb.iter_mut() {
                *g *= scale;
            }
        }
        Ok((total * scale + 0.5 * l2 * reg, grads))
    }

    fn apply_step(&mut self, grads: &Gradients, lr: f64) {
        for (w, g) in self.weights.iter_mut().zip(&grads.weights) {
            for (v, &d) in w.iter_mut().zip(g) {
                *v -= lr * d;
            }
        }
        for (b, g) in self.biases.iter_mut().zip(&grads.biases) {
            for (v, &d) in b.iter_mut().zip(g) {
                *v -= lr * d;
            }
        }
    }

    /// Adds i.i.d. Gaussian noise to every weight matrix with standard
    /// deviation `sigma_rel * std(W)` (population std per layer; `sigma_rel`
    /// itself when the layer is constant). Biases are left untouched.
    pub fn perturb_weights(&self, sigma_rel: f64, seed: u64) -> Result<Self> {
        if !(sigma_rel.is_finite() && sigma_rel > 0.0) {
            return Err(Error::invalid(format!("sigma_rel must be positive, got {sigma_rel}")));
        }
        let mut rng = rng::seeded(seed);
        let mut out = self.clone();
        for w in out.weights.iter_mut() {
            let n = w.len() as f64;
            let mean = w.iter().sum::<f64>() / n;
            let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            let scale = if std > 0.0 { sigma_rel * std } else { sigma_rel };
            let dist = Normal::new(0.0, scale).expect("positive std");
            for v in w.iter_mut() {
                *v += dist.sample(&mut rng);
            }
        }
        Ok(out)
    }

    /// Attack features for one query.
    ///
    /// Black-box: softmax sorted descending, then the cross-entropy at
    /// `true_label` (`num_classes + 1` values). White-box appends the
    /// penultimate activations, the Frobenius norm of the last-layer loss
    /// gradient and that gradient's per-row norms.
    pub fn extract_features(&self, x: &[f64], true_label: usize, mode: FeatureMode) -> Result<Vec<f64>> {
        let out = self.forward(x, Some(true_label))?;
        let mut features = out.softmax.clone();
        features.sort_by(|a, b| b.total_cmp(a));
        features.push(out.loss.unwrap());
        if mode == FeatureMode::Whitebox {
            features.extend_from_slice(&out.penultimate);
            let grad = out.loss_grad_last.unwrap();
            let h = out.penultimate.len();
            let row_norms: Vec<f64> = grad
                .chunks_exact(h)
                .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect();
            let frob = row_norms.iter().map(|v| v * v).sum::<f64>().sqrt();
            features.push(frob);
            features.extend(row_norms);
        }
        Ok(features)
    }

    pub fn feature_len(&self, mode: FeatureMode) -> usize {
        let c = self.num_classes();
        match mode {
            FeatureMode::Blackbox => c + 1,
            FeatureMode::Whitebox => c + 1 + self.penultimate_dim() + 1 + c,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            layer_sizes: self.layer_sizes.clone(),
            activation: self.activation,
            seed: self.seed,
            weights: self.weights.clone(),
            biases: self.biases.clone(),
        };
        Ok(serde_json::to_string_pretty(&ckpt)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unsupported format `{}`", ckpt.format)));
        }
        Self::from_parts(ckpt.layer_sizes, ckpt.weights, ckpt.biases, ckpt.activation, ckpt.seed)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

const CHECKPOINT_FORMAT: &str = "mia-fano-mlp/1";

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    layer_sizes: Vec<usize>,
    activation: Activation,
    seed: u64,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
    pub batch: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MlpModel,
    /// Mean objective per epoch.
    pub loss_trace: Vec<f64>,
}

/// Minibatch SGD on the rows of `data` whose ids are in `member_ids`.
/// Rows are reshuffled every epoch from a stream seeded by `cfg.seed`.
pub fn train_sgd(
    model: &MlpModel,
    data: &LabeledDataset,
    member_ids: &BTreeSet<u64>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if !(cfg.lr.is_finite() && cfg.lr > 0.0) {
        return Err(Error::invalid(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    if !(cfg.l2.is_finite() && cfg.l2 >= 0.0) {
        return Err(Error::invalid(format!("l2 must be non-negative, got {}", cfg.l2)));
    }
    if cfg.batch == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    if data.dim() != model.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.input_dim(),
            got: data.dim(),
        });
    }
    let mut positions = data.positions_of(member_ids);
    if positions.is_empty() {
        return Err(Error::invalid("no training members present in the dataset"));
    }
    let mut model = model.clone();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut rng = rng::seeded(cfg.seed);
    for epoch in 0..cfg.epochs {
        positions.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in positions.chunks(cfg.batch) {
            let xs: Vec<&[f64]> = chunk.iter().map(|&i| data.row(i)).collect();
            let ys: Vec<usize> = chunk.iter().map(|&i| data.label(i)).collect();
            let (loss, grads) = model.loss_and_grad(&xs, &ys, cfg.l2)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            epoch_loss += loss * chunk.len() as f64;
            model.apply_step(&grads, cfg.lr);
        }
        let mean = epoch_loss / positions.len() as f64;
        if !mean.is_finite() || model.params().iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { epoch });
        }
        log::trace!("epoch {epoch}: loss {mean:.6}");
        trace.push(mean);
    }
    Ok(TrainOutcome {
        model,
        loss_trace: trace,
    })
}

/// Architecture plus training hyperparameters; everything needed to fit a
/// model on a member set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecipe {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
    pub batch: usize,
}

impl ModelRecipe {
    pub fn layer_sizes(&self, input_dim: usize, num_classes: usize) -> Vec<usize> {
        let mut sizes = Vec::with_capacity(self.hidden.len() + 2);
        sizes.push(input_dim);
        sizes.extend_from_slice(&self.hidden);
        sizes.push(num_classes);
        sizes
    }

    /// Initialises with `derive(seed, 0)` and trains with `derive(seed, 1)`.
    pub fn fit(&self, data: &LabeledDataset, member_ids: &BTreeSet<u64>, seed: u64) -> Result<TrainOutcome> {
        let sizes = self.layer_sizes(data.dim(), data.num_classes());
        let init = MlpModel::init(&sizes, self.activation, rng::derive(seed, 0))?;
        let cfg = TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            l2: self.l2,
            batch: self.batch,
            seed: rng::derive(seed, 1),
        };
        train_sgd(&init, data, member_ids, &cfg)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Softmax and log-softmax with max subtraction.
pub fn softmax_with_log(logits: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = logits.iter().map(|z| z - max).collect();
    let sum: f64 = shifted.iter().map(|s| s.exp()).sum();
    let log_sum = sum.ln();
    let log_p: Vec<f64> = shifted.iter().map(|s| s - log_sum).collect();
    let p = shifted.iter().map(|s| s.exp() / sum).collect();
    (p, log_p)
}
