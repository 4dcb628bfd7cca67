//! Shot-matched linear probe: a softmax classifier trained from scratch on
//! exactly the shot embeddings shown for one test tile.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ProbeError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no training examples for label {0:?}")]
    MissingLabelExamples(String),
    #[error("dimension mismatch: model {model}, input {input}")]
    DimMismatch { model: usize, input: usize },
    #[error("training diverged to a non-finite value")]
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            init_std: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub dim: usize,
    /// Row-major `labels.len() x dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ProbeModel {
    pub fn zeros(labels: Vec<String>, dim: usize) -> Self {
        ProbeModel {
            dim,
            weights: vec![0.0; labels.len() * dim],
            bias: vec![0.0; labels.len()],
            labels,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.dim)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn check_shapes(model: &ProbeModel, x: &[Vec<f64>], y: &[usize]) -> Result<(), ProbeError> {
    if x.is_empty() {
        return Err(ProbeError::ShapeMismatch("no examples".into()));
    }
    if x.len() != y.len() {
        return Err(ProbeError::ShapeMismatch(format!(
            "{} inputs but {} labels",
            x.len(),
            y.len()
        )));
    }
    if model.weights.len() != model.num_classes() * model.dim
        || model.bias.len() != model.num_classes()
    {
        return Err(ProbeError::ShapeMismatch("model parameters".into()));
    }
    if let Some(row) = x.iter().find(|r| r.len() != model.dim) {
        return Err(ProbeError::ShapeMismatch(format!(
            "input row has {} dims, model has {}",
            row.len(),
            model.dim
        )));
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= model.num_classes()) {
        return Err(ProbeError::ShapeMismatch(format!("label index {bad} out of range")));
    }
    Ok(())
}

/// Mean softmax cross-entropy over the batch and its analytic gradients.
pub fn loss_and_grad(
    model: &ProbeModel,
    x: &[Vec<f64>],
    y: &[usize],
) -> Result<(f64, Gradients), ProbeError> {
    check_shapes(model, x, y)?;
    let n = x.len() as f64;
    let mut loss = 0.0;
    let mut gw = vec![0.0; model.weights.len()];
    let mut gb = vec![0.0; model.bias.len()];
    for (row, &target) in x.iter().zip(y) {
        let logits = model.logits(row);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
        loss += log_sum - logits[target];
        for (c, z) in logits.iter().enumerate() {
            let delta = ((z - log_sum).exp() - if c == target { 1.0 } else { 0.0 }) / n;
            gb[c] += delta;
            for (g, v) in gw[c * model.dim..(c + 1) * model.dim].iter_mut().zip(row) {
                *g += delta * v;
            }
        }
    }
    Ok((
        loss / n,
        Gradients {
            weights: gw,
            bias: gb,
        },
    ))
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(len: usize) -> Self {
        Adam {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
}

/// Trains a freshly initialized probe with `config.epochs` full-batch Adam
/// steps. Weights start from N(0, init_std) under `config.seed`; bias is 0.
pub fn train_probe(
    x: &[Vec<f64>],
    y: &[usize],
    labels: &[String],
    config: &TrainConfig,
) -> Result<ProbeModel, ProbeError> {
    let dim = x.first().map(Vec::len).unwrap_or(0);
    let mut model = ProbeModel::zeros(labels.to_vec(), dim);
    check_shapes(&model, x, y)?;
    for (c, label) in labels.iter().enumerate() {
        if !y.contains(&c) {
            return Err(ProbeError::MissingLabelExamples(label.clone()));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, config.init_std)
        .map_err(|e| ProbeError::ShapeMismatch(format!("init_std: {e}")))?;
    for w in &mut model.weights {
        *w = rng.sample(normal);
    }

    let mut adam_w = Adam::new(model.weights.len());
    let mut adam_b = Adam::new(model.bias.len());
    for _ in 0..config.epochs {
        let (_, grads) = loss_and_grad(&model, x, y)?;
        adam_w.step(&mut model.weights, &grads.weights, config);
        adam_b.step(&mut model.bias, &grads.bias, config);
    }
    if !model.is_finite() {
        return Err(ProbeError::NonFinite);
    }
    Ok(model)
}

/// Argmax class index (lowest index on ties) and the softmax probabilities.
pub fn predict(model: &ProbeModel, x: &[f64]) -> Result<(usize, Vec<f64>), ProbeError> {
    if x.len() != model.dim {
        return Err(ProbeError::DimMismatch {
            model: model.dim,
            input: x.len(),
        });
    }
    let probs = softmax(&model.logits(x));
    let mut best = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > probs[best] {
            best = i;
        }
    }
    Ok((best, probs))
}
