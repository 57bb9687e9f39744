//! Fully connected ReLU networks with a designated split layer.
//!
//! The split layer divides the net into a feature extractor and a head:
//! `forward(x)` is defined as `forward_head(forward_features(x))`, computed
//! through the exact same code path so the two-stage result is bit-identical
//! to the one-stage one. Latent-space corrections are inserted between the
//! two stages.
//!
//! Training is softmax cross-entropy with SGD or Adam, full-batch by default.
//! Weight init is He-uniform (`+-sqrt(6/fan_in)`), biases start at zero, and
//! every random draw comes from [`SplitMix64`], so a `(architecture, seed)`
//! pair pins the trained model exactly.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{MathError, Matrix, Vector};
use crate::rng::SplitMix64;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("dataset is empty or labels do not match sample count")]
    BadDataset,
    #[error("loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error(transparent)]
    Math(#[from] MathError),
    #[error("model file {path}: {detail}")]
    BadModelFile { path: String, detail: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type NnResult<T> = Result<T, NnError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

/// Training hyperparameters. `batch_size: None` means full batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub epochs: usize,
    #[serde(default)]
    pub batch_size: Option<usize>,
    pub seed: u64,
}

impl TrainConfig {
    fn validate(&self) -> NnResult<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(NnError::InvalidConfig(format!(
                "learning rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(NnError::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size == Some(0) {
            return Err(NnError::InvalidConfig("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Multi-layer perceptron: ReLU on hidden layers, identity on the output.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layer_dims: Vec<usize>,
    split_layer: usize,
    weights: Vec<Matrix>,
    biases: Vec<Vector>,
}

impl MlpModel {
    /// He-uniform initialized model. Weights for each layer are drawn
    /// row-major from `uniform(-sqrt(6/fan_in), sqrt(6/fan_in))`, layer by
    /// layer from a fresh [`SplitMix64`] stream; biases start at zero.
    pub fn new(layer_dims: &[usize], split_layer: usize, seed: u64) -> NnResult<Self> {
        Self::validate_architecture(layer_dims, split_layer)?;
        let mut rng = SplitMix64::new(seed);
        let mut weights = Vec::with_capacity(layer_dims.len() - 1);
        let mut biases = Vec::with_capacity(layer_dims.len() - 1);
        for k in 1..layer_dims.len() {
            let fan_in = layer_dims[k - 1];
            let bound = (6.0 / fan_in as f64).sqrt();
            let values: Vec<f64> = (0..layer_dims[k] * fan_in)
                .map(|_| (rng.next_f64() * 2.0 - 1.0) * bound)
                .collect();
            weights.push(Matrix::new(layer_dims[k], fan_in, values)?);
            biases.push(Vector::zeros(layer_dims[k]));
        }
        Ok(MlpModel { layer_dims: layer_dims.to_vec(), split_layer, weights, biases })
    }

    /// Builds a model from explicit parameters, validating shapes.
    pub fn from_parts(
        layer_dims: &[usize],
        split_layer: usize,
        weights: Vec<Matrix>,
        biases: Vec<Vector>,
    ) -> NnResult<Self> {
        Self::validate_architecture(layer_dims, split_layer)?;
        let n_layers = layer_dims.len() - 1;
        if weights.len() != n_layers || biases.len() != n_layers {
            return Err(NnError::InvalidArchitecture(format!(
                "expected {n_layers} weight/bias pairs, got {}/{}",
                weights.len(),
                biases.len()
            )));
        }
        for k in 0..n_layers {
            if weights[k].n_rows() != layer_dims[k + 1] || weights[k].n_cols() != layer_dims[k] {
                return Err(NnError::InvalidArchitecture(format!(
                    "layer {} weight shape {}x{} does not match dims {}x{}",
                    k + 1,
                    weights[k].n_rows(),
                    weights[k].n_cols(),
                    layer_dims[k + 1],
                    layer_dims[k]
                )));
            }
            if biases[k].dim() != layer_dims[k + 1] {
                return Err(NnError::InvalidArchitecture(format!(
                    "layer {} bias dim {} does not match {}",
                    k + 1,
                    biases[k].dim(),
                    layer_dims[k + 1]
                )));
            }
        }
        Ok(MlpModel { layer_dims: layer_dims.to_vec(), split_layer, weights, biases })
    }

    fn validate_architecture(layer_dims: &[usize], split_layer: usize) -> NnResult<()> {
        if layer_dims.len() < 3 {
            return Err(NnError::InvalidArchitecture(
                "need input, at least one hidden, and output dims".into(),
            ));
        }
        if layer_dims.iter().any(|&d| d == 0) {
            return Err(NnError::InvalidArchitecture("zero-width layer".into()));
        }
        let n_layers = layer_dims.len() - 1;
        if split_layer == 0 || split_layer >= n_layers {
            return Err(NnError::InvalidArchitecture(format!(
                "split layer {split_layer} must be in 1..{n_layers}"
            )));
        }
        Ok(())
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn split_layer(&self) -> usize {
        self.split_layer
    }

    pub fn n_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    /// Width of the split-layer activation the head consumes.
    pub fn feature_dim(&self) -> usize {
        self.layer_dims[self.split_layer]
    }

    pub fn layer_params(&self, layer: usize) -> (&Matrix, &Vector) {
        (&self.weights[layer], &self.biases[layer])
    }

    fn check_input(&self, x: &Vector) -> NnResult<()> {
        if x.dim() != self.input_dim() {
            return Err(NnError::Math(MathError::DimensionMismatch {
                expected: self.input_dim(),
                got: x.dim(),
            }));
        }
        Ok(())
    }

    /// Applies layers `from..to` (0-based layer indices) to `v`, with ReLU on
    /// every layer except the final one of the whole network.
    fn pass(&self, v: &Vector, from: usize, to: usize) -> NnResult<Vector> {
        let mut a = v.clone();
        for k in from..to {
            let z = self.weights[k].matvec(&a)?.add(&self.biases[k])?;
            a = if k + 1 == self.n_layers() { z } else { relu(&z) };
        }
        Ok(a)
    }

    /// Logits for input `x`. Identical bit-for-bit to
    /// `forward_head(forward_features(x))`.
    pub fn forward(&self, x: &Vector) -> NnResult<Vector> {
        self.check_input(x)?;
        let features = self.pass(x, 0, self.split_layer)?;
        self.pass(&features, self.split_layer, self.n_layers())
    }

    /// Post-ReLU activation at the split layer.
    pub fn forward_features(&self, x: &Vector) -> NnResult<Vector> {
        self.check_input(x)?;
        self.pass(x, 0, self.split_layer)
    }

    /// Logits from a split-layer activation.
    pub fn forward_head(&self, features: &Vector) -> NnResult<Vector> {
        if features.dim() != self.feature_dim() {
            return Err(NnError::Math(MathError::DimensionMismatch {
                expected: self.feature_dim(),
                got: features.dim(),
            }));
        }
        self.pass(features, self.split_layer, self.n_layers())
    }

    /// Argmax over logits; ties resolve to the lowest index.
    pub fn predict_class(&self, x: &Vector) -> NnResult<usize> {
        Ok(argmax(&self.forward(x)?))
    }

    /// Full forward pass keeping every pre-activation and activation.
    /// `activations[0]` is the input; `pre_activations[k]` and
    /// `activations[k + 1]` belong to layer `k`.
    pub fn forward_trace(&self, x: &Vector) -> NnResult<ForwardTrace> {
        self.check_input(x)?;
        let mut pre = Vec::with_capacity(self.n_layers());
        let mut acts = Vec::with_capacity(self.n_layers() + 1);
        acts.push(x.clone());
        for k in 0..self.n_layers() {
            let z = self.weights[k].matvec(acts.last().unwrap())?.add(&self.biases[k])?;
            let a = if k + 1 == self.n_layers() { z.clone() } else { relu(&z) };
            pre.push(z);
            acts.push(a);
        }
        Ok(ForwardTrace { pre_activations: pre, activations: acts })
    }

    /// True when every bias in the network is exactly zero.
    pub fn is_bias_free(&self) -> bool {
        self.biases.iter().all(|b| b.as_slice().iter().all(|&v| v == 0.0))
    }
}

pub fn argmax(v: &Vector) -> usize {
    let mut best = 0;
    for i in 1..v.dim() {
        if v.get(i) > v.get(best) {
            best = i;
        }
    }
    best
}

fn relu(v: &Vector) -> Vector {
    Vector::from_raw(v.as_slice().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect())
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub pre_activations: Vec<Vector>,
    pub activations: Vec<Vector>,
}

/// Numerically stable `(log_softmax_denominator, loss)` for one sample.
fn cross_entropy(logits: &Vector, label: usize) -> f64 {
    let max = logits.as_slice().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + logits.as_slice().iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    lse - logits.get(label)
}

fn softmax(logits: &Vector) -> Vec<f64> {
    let max = logits.as_slice().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.as_slice().iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Per-layer parameter gradients, same shapes as the model's parameters.
struct Gradients {
    weights: Vec<Matrix>,
    biases: Vec<Vector>,
}

impl Gradients {
    fn zeros_like(model: &MlpModel) -> Gradients {
        Gradients {
            weights: model
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.n_rows(), w.n_cols()))
                .collect(),
            biases: model.biases.iter().map(|b| Vector::zeros(b.dim())).collect(),
        }
    }

    fn scale(&mut self, factor: f64) {
        for w in &mut self.weights {
            for r in 0..w.n_rows() {
                for c in 0..w.n_cols() {
                    w.set(r, c, w.get(r, c) * factor);
                }
            }
        }
        for b in &mut self.biases {
            *b = b.scale(factor);
        }
    }
}

/// Backprop of the cross-entropy loss for one sample, accumulated into `grads`.
/// Returns the sample loss. ReLU uses the subgradient `1[z > 0]`.
fn accumulate_gradients(
    model: &MlpModel,
    x: &Vector,
    label: usize,
    grads: &mut Gradients,
) -> NnResult<f64> {
    if label >= model.output_dim() {
        return Err(NnError::LabelOutOfRange { label, n_classes: model.output_dim() });
    }
    let trace = model.forward_trace(x)?;
    let logits = trace.activations.last().unwrap();
    let loss = cross_entropy(logits, label);

    let probs = softmax(logits);
    let mut g_pre: Vec<f64> = probs;
    g_pre[label] -= 1.0;

    for k in (0..model.n_layers()).rev() {
        let a_in = &trace.activations[k];
        let gw = &mut grads.weights[k];
        for r in 0..gw.n_rows() {
            let g = g_pre[r];
            if g != 0.0 {
                for c in 0..gw.n_cols() {
                    gw.set(r, c, gw.get(r, c) + g * a_in.get(c));
                }
            }
        }
        let gb = &grads.biases[k];
        let mut gb_new = Vec::with_capacity(gb.dim());
        for (i, &g) in g_pre.iter().enumerate() {
            gb_new.push(gb.get(i) + g);
        }
        grads.biases[k] = Vector::from_raw(gb_new);

        if k > 0 {
            let w = &model.weights[k];
            let mut g_in = vec![0.0; w.n_cols()];
            for r in 0..w.n_rows() {
                let g = g_pre[r];
                if g != 0.0 {
                    for (c, gi) in g_in.iter_mut().enumerate() {
                        *gi += w.get(r, c) * g;
                    }
                }
            }
            let z_prev = &trace.pre_activations[k - 1];
            for (i, gi) in g_in.iter_mut().enumerate() {
                if z_prev.get(i) <= 0.0 {
                    *gi = 0.0;
                }
            }
            g_pre = g_in;
        }
    }
    Ok(loss)
}

struct AdamState {
    m: Gradients,
    v: Gradients,
    t: u64,
}

/// Loss history and summary statistics of a training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean cross-entropy per epoch, measured on each batch before its update.
    pub loss_history: Vec<f64>,
    /// Accuracy on the training inputs after the final epoch.
    pub final_accuracy: f64,
}

/// Trains `model` on `(inputs, labels)` and returns the updated model with a
/// loss history. Full batch when `batch_size` is `None`; otherwise each epoch
/// shuffles the sample order with the config seed's stream and walks
/// consecutive chunks. Aborts with `NonFiniteLoss` if the loss diverges.
pub fn train(
    mut model: MlpModel,
    inputs: &Matrix,
    labels: &[usize],
    config: &TrainConfig,
) -> NnResult<(MlpModel, TrainReport)> {
    config.validate()?;
    let n = inputs.n_rows();
    if n == 0 || labels.len() != n {
        return Err(NnError::BadDataset);
    }
    if inputs.n_cols() != model.input_dim() {
        return Err(NnError::Math(MathError::DimensionMismatch {
            expected: model.input_dim(),
            got: inputs.n_cols(),
        }));
    }
    for &label in labels {
        if label >= model.output_dim() {
            return Err(NnError::LabelOutOfRange { label, n_classes: model.output_dim() });
        }
    }

    let batch_size = config.batch_size.unwrap_or(n).min(n);
    let mut shuffle_rng = SplitMix64::new(config.seed);
    let mut adam = match config.optimizer {
        Optimizer::Adam => Some(AdamState {
            m: Gradients::zeros_like(&model),
            v: Gradients::zeros_like(&model),
            t: 0,
        }),
        Optimizer::Sgd => None,
    };

    let mut order: Vec<usize> = (0..n).collect();
    let mut loss_history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        if config.batch_size.is_some() {
            shuffle_rng.shuffle(&mut order);
        }
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch_size) {
            let mut grads = Gradients::zeros_like(&model);
            let mut batch_loss = 0.0;
            for &idx in chunk {
                batch_loss +=
                    accumulate_gradients(&model, &inputs.row_vector(idx), labels[idx], &mut grads)?;
            }
            if !batch_loss.is_finite() {
                return Err(NnError::NonFiniteLoss { epoch });
            }
            epoch_loss += batch_loss;
            grads.scale(1.0 / chunk.len() as f64);
            apply_update(&mut model, &grads, config, adam.as_mut());
        }
        let mean_loss = epoch_loss / n as f64;
        if !mean_loss.is_finite() {
            return Err(NnError::NonFiniteLoss { epoch });
        }
        loss_history.push(mean_loss);
    }

    let mut correct = 0usize;
    for i in 0..n {
        if model.predict_class(&inputs.row_vector(i))? == labels[i] {
            correct += 1;
        }
    }
    let report = TrainReport { loss_history, final_accuracy: correct as f64 / n as f64 };
    Ok((model, report))
}

fn apply_update(
    model: &mut MlpModel,
    grads: &Gradients,
    config: &TrainConfig,
    adam: Option<&mut AdamState>,
) {
    let lr = config.learning_rate;
    match adam {
        None => {
            for k in 0..model.weights.len() {
                let w = &mut model.weights[k];
                let g = &grads.weights[k];
                for r in 0..w.n_rows() {
                    for c in 0..w.n_cols() {
                        w.set(r, c, w.get(r, c) - lr * g.get(r, c));
                    }
                }
                let updated = model.biases[k].sub(&grads.biases[k].scale(lr)).expect("shapes match");
                model.biases[k] = updated;
            }
        }
        Some(state) => {
            state.t += 1;
            let t = state.t as f64;
            let bc1 = 1.0 - ADAM_BETA1.powf(t);
            let bc2 = 1.0 - ADAM_BETA2.powf(t);
            for k in 0..model.weights.len() {
                {
                    let w = &mut model.weights[k];
                    let g = &grads.weights[k];
                    let m = &mut state.m.weights[k];
                    let v = &mut state.v.weights[k];
                    for r in 0..w.n_rows() {
                        for c in 0..w.n_cols() {
                            let gg = g.get(r, c);
                            let mm = ADAM_BETA1 * m.get(r, c) + (1.0 - ADAM_BETA1) * gg;
                            let vv = ADAM_BETA2 * v.get(r, c) + (1.0 - ADAM_BETA2) * gg * gg;
                            m.set(r, c, mm);
                            v.set(r, c, vv);
                            let step = lr * (mm / bc1) / ((vv / bc2).sqrt() + ADAM_EPS);
                            w.set(r, c, w.get(r, c) - step);
                        }
                    }
                }
                let g = &grads.biases[k];
                let m = &state.m.biases[k];
                let v = &state.v.biases[k];
                let mut new_b = Vec::with_capacity(g.dim());
                let mut new_m = Vec::with_capacity(g.dim());
                let mut new_v = Vec::with_capacity(g.dim());
                for i in 0..g.dim() {
                    let gg = g.get(i);
                    let mm = ADAM_BETA1 * m.get(i) + (1.0 - ADAM_BETA1) * gg;
                    let vv = ADAM_BETA2 * v.get(i) + (1.0 - ADAM_BETA2) * gg * gg;
                    new_m.push(mm);
                    new_v.push(vv);
                    let step = lr * (mm / bc1) / ((vv / bc2).sqrt() + ADAM_EPS);
                    new_b.push(model.biases[k].get(i) - step);
                }
                state.m.biases[k] = Vector::from_raw(new_m);
                state.v.biases[k] = Vector::from_raw(new_v);
                model.biases[k] = Vector::from_raw(new_b);
            }
        }
    }
}

/// Compares backprop gradients against central finite differences for every
/// parameter at one sample. Returns the maximum relative error, where the
/// relative error uses the denominator `max(|analytic|, |numeric|, 1e-6)`.
pub fn gradient_check(
    model: &MlpModel,
    x: &Vector,
    label: usize,
    epsilon: f64,
) -> NnResult<f64> {
    if !(epsilon > 0.0) {
        return Err(NnError::InvalidConfig("finite-difference step must be positive".into()));
    }
    let mut grads = Gradients::zeros_like(model);
    accumulate_gradients(model, x, label, &mut grads)?;

    let mut probe = model.clone();
    let mut max_err = 0.0f64;
    let mut check = |analytic: f64, numeric: f64| {
        let denom = analytic.abs().max(numeric.abs()).max(1e-6);
        let err = (analytic - numeric).abs() / denom;
        if err > max_err {
            max_err = err;
        }
    };

    for k in 0..model.weights.len() {
        for r in 0..model.weights[k].n_rows() {
            for c in 0..model.weights[k].n_cols() {
                let original = model.weights[k].get(r, c);
                probe.weights[k].set(r, c, original + epsilon);
                let up = cross_entropy(&probe.forward(x)?, label);
                probe.weights[k].set(r, c, original - epsilon);
                let down = cross_entropy(&probe.forward(x)?, label);
                probe.weights[k].set(r, c, original);
                check(grads.weights[k].get(r, c), (up - down) / (2.0 * epsilon));
            }
        }
        for i in 0..model.biases[k].dim() {
            let original = model.biases[k].get(i);
            probe.biases[k] = set_component(&probe.biases[k], i, original + epsilon);
            let up = cross_entropy(&probe.forward(x)?, label);
            probe.biases[k] = set_component(&probe.biases[k], i, original - epsilon);
            let down = cross_entropy(&probe.forward(x)?, label);
            probe.biases[k] = set_component(&probe.biases[k], i, original);
            check(grads.biases[k].get(i), (up - down) / (2.0 * epsilon));
        }
    }
    Ok(max_err)
}

fn set_component(v: &Vector, i: usize, value: f64) -> Vector {
    let mut values = v.as_slice().to_vec();
    values[i] = value;
    Vector::from_raw(values)
}

/// Optimizer settings and outcomes recorded alongside a saved model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config: TrainConfig,
    pub final_loss: f64,
    pub final_accuracy: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    format: String,
    layer_dims: Vec<usize>,
    split_layer: usize,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    training: Option<TrainSummary>,
}

const MODEL_FORMAT: &str = "rclarc-model-v1";

/// Model plus the optional training summary stored with it.
#[derive(Debug)]
pub struct LoadedModel {
    pub model: MlpModel,
    pub training: Option<TrainSummary>,
}

impl MlpModel {
    /// Writes the model as pretty-printed JSON. Weight matrices are stored
    /// row-major per layer.
    pub fn save(&self, path: &Path, training: Option<&TrainSummary>) -> NnResult<()> {
        let file = ModelFile {
            format: MODEL_FORMAT.to_string(),
            layer_dims: self.layer_dims.clone(),
            split_layer: self.split_layer,
            weights: self
                .weights
                .iter()
                .map(|w| {
                    (0..w.n_rows()).flat_map(|r| w.row(r).iter().cloned()).collect::<Vec<f64>>()
                })
                .collect(),
            biases: self.biases.iter().map(|b| b.as_slice().to_vec()).collect(),
            training: training.cloned(),
        };
        let json = serde_json::to_string_pretty(&file).expect("model serializes");
        write_text(path, &json)
    }

    pub fn load(path: &Path) -> NnResult<LoadedModel> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| NnError::Io { path: path.display().to_string(), source })?;
        let file: ModelFile = serde_json::from_str(&text).map_err(|e| NnError::BadModelFile {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        if file.format != MODEL_FORMAT {
            return Err(NnError::BadModelFile {
                path: path.display().to_string(),
                detail: format!("unknown format marker {:?}", file.format),
            });
        }
        let n_layers = file.layer_dims.len().saturating_sub(1);
        if file.weights.len() != n_layers || file.biases.len() != n_layers {
            return Err(NnError::BadModelFile {
                path: path.display().to_string(),
                detail: "layer count mismatch".into(),
            });
        }
        let mut weights = Vec::with_capacity(n_layers);
        let mut biases = Vec::with_capacity(n_layers);
        for k in 0..n_layers {
            let rows = file.layer_dims[k + 1];
            let cols = file.layer_dims[k];
            weights.push(Matrix::new(rows, cols, file.weights[k].clone()).map_err(|e| {
                NnError::BadModelFile {
                    path: path.display().to_string(),
                    detail: format!("layer {} weights: {e}", k + 1),
                }
            })?);
            biases.push(Vector::new(file.biases[k].clone()).map_err(|e| {
                NnError::BadModelFile {
                    path: path.display().to_string(),
                    detail: format!("layer {} biases: {e}", k + 1),
                }
            })?);
        }
        let model = MlpModel::from_parts(&file.layer_dims, file.split_layer, weights, biases)?;
        Ok(LoadedModel { model, training: file.training })
    }
}

pub(crate) fn write_text(path: &Path, text: &str) -> NnResult<()> {
    let mut file = std::fs::File::create(path)
        .map_err(|source| NnError::Io { path: path.display().to_string(), source })?;
    file.write_all(text.as_bytes())
        .and_then(|_| file.write_all(b"\n"))
        .map_err(|source| NnError::Io { path: path.display().to_string(), source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn toy_inputs(n: usize, seed: u64) -> (Matrix, Vec<usize>) {
        // Two well-separated Gaussian blobs in 4 dimensions.
        let mut rng = SplitMix64::new(seed);
        let mut values = Vec::with_capacity(n * 4);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = i % 2;
            let center = if label == 0 { -2.0 } else { 2.0 };
            for _ in 0..4 {
                values.push(center + rng.next_normal());
            }
            labels.push(label);
        }
        (Matrix::new(n, 4, values).unwrap(), labels)
    }

    #[test]
    fn init_respects_he_uniform_bounds() {
        let model = MlpModel::new(&[8, 16, 3], 1, 42).unwrap();
        let bound0 = (6.0f64 / 8.0).sqrt();
        let (w0, b0) = model.layer_params(0);
        for r in 0..w0.n_rows() {
            for c in 0..w0.n_cols() {
                assert!(w0.get(r, c).abs() <= bound0);
            }
        }
        assert!(b0.as_slice().iter().all(|&v| v == 0.0));
        let bound1 = (6.0f64 / 16.0).sqrt();
        let (w1, _) = model.layer_params(1);
        assert!((0..3).all(|r| (0..16).all(|c| w1.get(r, c).abs() <= bound1)));
    }

    #[test]
    fn split_composition_is_bitwise_identical() {
        let model = MlpModel::new(&[5, 7, 6, 2], 2, 9).unwrap();
        let mut rng = SplitMix64::new(1);
        for _ in 0..50 {
            let x = Vector::new((0..5).map(|_| rng.next_normal() * 3.0).collect()).unwrap();
            let direct = model.forward(&x).unwrap();
            let staged = model.forward_head(&model.forward_features(&x).unwrap()).unwrap();
            assert_eq!(direct, staged);
        }
    }

    #[test]
    fn rejects_invalid_split_layers() {
        assert!(MlpModel::new(&[4, 8, 2], 0, 1).is_err());
        assert!(MlpModel::new(&[4, 8, 2], 2, 1).is_err());
        assert!(MlpModel::new(&[4, 2], 1, 1).is_err());
        assert!(MlpModel::new(&[4, 8, 2], 1, 1).is_ok());
    }

    #[test]
    fn predict_class_breaks_ties_low() {
        assert_eq!(argmax(&Vector::from_slice(&[1.0, 1.0, 0.5]).unwrap()), 0);
        assert_eq!(argmax(&Vector::from_slice(&[0.2, 1.0, 1.0]).unwrap()), 1);
    }

    #[test]
    fn training_reduces_loss_and_fits_blobs() {
        let (inputs, labels) = toy_inputs(200, 3);
        let model = MlpModel::new(&[4, 8, 2], 1, 7).unwrap();
        let config = TrainConfig {
            optimizer: Optimizer::Adam,
            learning_rate: 0.01,
            epochs: 200,
            batch_size: None,
            seed: 11,
        };
        let (trained, report) = train(model, &inputs, &labels, &config).unwrap();
        assert_eq!(report.loss_history.len(), 200);
        assert!(report.loss_history[199] < report.loss_history[0] * 0.1);
        assert!(report.final_accuracy >= 0.99, "accuracy {}", report.final_accuracy);
        let correct = (0..inputs.n_rows())
            .filter(|&i| trained.predict_class(&inputs.row_vector(i)).unwrap() == labels[i])
            .count();
        assert_eq!(correct as f64 / 200.0, report.final_accuracy);
    }

    #[test]
    fn sgd_and_minibatch_paths_run_deterministically() {
        let (inputs, labels) = toy_inputs(64, 5);
        let config = TrainConfig {
            optimizer: Optimizer::Sgd,
            learning_rate: 0.05,
            epochs: 30,
            batch_size: Some(16),
            seed: 2,
        };
        let run = |seed| {
            let model = MlpModel::new(&[4, 6, 2], 1, seed).unwrap();
            train(model, &inputs, &labels, &config).unwrap()
        };
        let (m1, r1) = run(1);
        let (m2, r2) = run(1);
        assert_eq!(m1, m2);
        assert_eq!(r1.loss_history, r2.loss_history);
        assert!(r1.loss_history.last().unwrap() < r1.loss_history.first().unwrap());
    }

    #[test]
    fn divergent_training_reports_non_finite_loss() {
        let (inputs, labels) = toy_inputs(32, 8);
        let model = MlpModel::new(&[4, 8, 2], 1, 3).unwrap();
        let config = TrainConfig {
            optimizer: Optimizer::Sgd,
            learning_rate: 1e12,
            epochs: 50,
            batch_size: None,
            seed: 0,
        };
        match train(model, &inputs, &labels, &config) {
            Err(NnError::NonFiniteLoss { .. }) => {}
            other => panic!("expected NonFiniteLoss, got {other:?}"),
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = SplitMix64::new(77);
        for arch in [vec![3, 8, 2], vec![5, 10, 6, 3], vec![4, 6, 6, 6, 2]] {
            let split = (arch.len() - 1) / 2;
            let model = MlpModel::new(&arch, split.max(1), rng.next_u64()).unwrap();
            let x = Vector::new((0..arch[0]).map(|_| rng.next_normal()).collect()).unwrap();
            let label = rng.next_below(*arch.last().unwrap() as u64) as usize;
            let err = gradient_check(&model, &x, label, 1e-5).unwrap();
            assert!(err <= 1e-4, "gradient error {err:e} for arch {arch:?}");
        }
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let (inputs, mut labels) = toy_inputs(10, 1);
        labels[3] = 5;
        let model = MlpModel::new(&[4, 6, 2], 1, 1).unwrap();
        let config = TrainConfig {
            optimizer: Optimizer::Sgd,
            learning_rate: 0.1,
            epochs: 1,
            batch_size: None,
            seed: 0,
        };
        assert!(matches!(
            train(model, &inputs, &labels, &config),
            Err(NnError::LabelOutOfRange { label: 5, n_classes: 2 })
        ));
    }

    #[test]
    fn model_file_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let (inputs, labels) = toy_inputs(50, 21);
        let model = MlpModel::new(&[4, 5, 2], 1, 13).unwrap();
        let config = TrainConfig {
            optimizer: Optimizer::Adam,
            learning_rate: 0.02,
            epochs: 40,
            batch_size: None,
            seed: 4,
        };
        let (trained, report) = train(model, &inputs, &labels, &config).unwrap();
        let summary = TrainSummary {
            config: config.clone(),
            final_loss: *report.loss_history.last().unwrap(),
            final_accuracy: report.final_accuracy,
        };
        trained.save(&path, Some(&summary)).unwrap();
        let loaded = MlpModel::load(&path).unwrap();
        assert_eq!(loaded.model, trained);
        assert_eq!(loaded.training.unwrap().config, config);
    }
}
