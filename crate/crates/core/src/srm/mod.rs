//! Spatial relation classifier: a three-affine-layer ReLU MLP mapping a pair
//! feature vector to per-relation probabilities (softmax for multiclass
//! vocabularies, independent sigmoids for multilabel ones).

mod io;
mod train;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dataio::{RelationMode, RelationVocabulary};
use crate::features::{FeatureSchema, FeatureVector};
use crate::{Error, Result};

pub use io::{load_model, model_from_bytes, model_to_bytes, save_model, MODEL_MAGIC, MODEL_VERSION};
pub use train::{adam_step, resume, train, AdamState, EpochLog, TrainConfig, TrainLog};

/// Dense affine layer; `weights` is row-major `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn glorot(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        Self {
            in_dim,
            out_dim,
            weights,
            bias: vec![0.0; out_dim],
        }
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.weights.chunks_exact(self.in_dim).zip(&self.bias).map(|(row, b)| {
            row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b
        }));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<DenseLayer>,
    pub schema: FeatureSchema,
    pub vocabulary: RelationVocabulary,
}

impl MlpParams {
    /// Zero-initialized network with the given layer widths
    /// (`[input, hidden.., output]`).
    pub fn zeros(dims: &[usize], schema: FeatureSchema, vocabulary: RelationVocabulary) -> Result<Self> {
        let layers = dims.windows(2).map(|w| DenseLayer::zeros(w[0], w[1])).collect();
        let p = Self {
            layers,
            schema,
            vocabulary,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn glorot(dims: &[usize], schema: FeatureSchema, vocabulary: RelationVocabulary, rng: &mut ChaCha8Rng) -> Result<Self> {
        let layers = dims.windows(2).map(|w| DenseLayer::glorot(w[0], w[1], rng)).collect();
        let p = Self {
            layers,
            schema,
            vocabulary,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.vocabulary.validate()?;
        if self.layers.is_empty() {
            return Err(Error::validation("model.layers", "no layers"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.weights.len() != l.in_dim * l.out_dim || l.bias.len() != l.out_dim {
                return Err(Error::validation(format!("model.layers[{i}]"), "buffer sizes do not match shape"));
            }
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::validation(
                    format!("model.layers[{}]", i + 1),
                    format!("input {} does not chain from output {}", pair[1].in_dim, pair[0].out_dim),
                ));
            }
        }
        if self.output_dim() != self.vocabulary.len() {
            return Err(Error::validation(
                "model.output_dim",
                format!("{} outputs for {} relations", self.output_dim(), self.vocabulary.len()),
            ));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.out_dim))
            .collect()
    }

    pub fn mode(&self) -> RelationMode {
        self.vocabulary.mode
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// All parameters, layer by layer (weights then bias).
    pub fn iter_params(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }

    pub fn iter_params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    /// Mutable access to the `i`-th parameter in `iter_params` order.
    pub fn param_mut(&mut self, mut i: usize) -> Option<&mut f64> {
        for l in &mut self.layers {
            let n = l.weights.len();
            if i < n {
                return Some(&mut l.weights[i]);
            }
            i -= n;
            if i < l.bias.len() {
                return Some(&mut l.bias[i]);
            }
            i -= l.bias.len();
        }
        None
    }

    /// Rounds every parameter to the nearest `f32`, the precision of model files.
    pub fn quantize_f32(&mut self) {
        self.iter_params_mut().for_each(|p| *p = *p as f32 as f64);
    }

    pub fn check_input(&self, x: &FeatureVector) -> Result<()> {
        if x.schema != self.schema || x.len() != self.input_dim() {
            return Err(Error::SchemaMismatch {
                expected: format!("{} ({} values)", self.schema, self.input_dim()),
                found: format!("{} ({} values)", x.schema, x.len()),
            });
        }
        Ok(())
    }

    /// Pre-activation outputs of the last layer.
    pub fn logits(&self, x: &FeatureVector) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut cur = x.values.clone();
        let mut next = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            layer.apply(&cur, &mut next);
            if i + 1 < self.layers.len() {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelationDistribution {
    pub probs: Vec<f64>,
    pub mode: RelationMode,
}

impl RelationDistribution {
    /// Indices sorted by descending probability, ties by ascending index.
    pub fn ranked(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.probs.len()).collect();
        idx.sort_by(|&a, &b| self.probs[b].total_cmp(&self.probs[a]).then(a.cmp(&b)));
        idx
    }

    pub fn argmax(&self) -> usize {
        self.ranked()[0]
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn forward(params: &MlpParams, x: &FeatureVector) -> Result<RelationDistribution> {
    let logits = params.logits(x)?;
    let probs = match params.mode() {
        RelationMode::Multiclass => softmax(&logits),
        RelationMode::Multilabel => logits.iter().map(|&z| sigmoid(z)).collect(),
    };
    Ok(RelationDistribution {
        probs,
        mode: params.mode(),
    })
}

/// A feature vector with its true relation indices (exactly one for
/// multiclass vocabularies).
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: FeatureVector,
    pub labels: Vec<usize>,
}

/// Gradients laid out exactly like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<DenseLayer>,
}

impl Gradients {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            layers: params.layers.iter().map(|l| DenseLayer::zeros(l.in_dim, l.out_dim)).collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }
}

fn check_labels(params: &MlpParams, s: &Sample) -> Result<()> {
    let c = params.output_dim();
    if s.labels.iter().any(|&l| l >= c) {
        return Err(Error::validation("labels", format!("label index out of range for {c} relations")));
    }
    if params.mode() == RelationMode::Multiclass && s.labels.len() != 1 {
        return Err(Error::validation("labels", "multiclass samples need exactly one label"));
    }
    Ok(())
}

/// Mean loss over the batch and its exact gradient. Multiclass uses softmax
/// cross-entropy; multilabel uses binary cross-entropy averaged over classes.
pub fn loss_and_grad(params: &MlpParams, batch: &[&Sample]) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n_layers = params.layers.len();
    let inv_n = 1.0 / batch.len() as f64;
    let classes = params.output_dim();
    let mut grads = Gradients::zeros_like(params);
    let mut total = 0.0;
    let mut acts: Vec<Vec<f64>> = vec![Vec::new(); n_layers + 1];
    for s in batch {
        params.check_input(&s.x)?;
        check_labels(params, s)?;
        // Forward, keeping post-activation outputs of every layer.
        acts[0].clone_from(&s.x.values);
        for (i, layer) in params.layers.iter().enumerate() {
            let (before, after) = acts.split_at_mut(i + 1);
            layer.apply(&before[i], &mut after[0]);
            if i + 1 < n_layers {
                after[0].iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        let logits = &acts[n_layers];
        let mut delta: Vec<f64> = match params.mode() {
            RelationMode::Multiclass => {
                let p = softmax(logits);
                let y = s.labels[0];
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
                total += lse - logits[y];
                p.iter()
                    .enumerate()
                    .map(|(c, pc)| (pc - if c == y { 1.0 } else { 0.0 }) * inv_n)
                    .collect()
            }
            RelationMode::Multilabel => {
                let inv_c = 1.0 / classes as f64;
                let mut sample_loss = 0.0;
                let d = logits
                    .iter()
                    .enumerate()
                    .map(|(c, &z)| {
                        let y = if s.labels.contains(&c) { 1.0 } else { 0.0 };
                        sample_loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
                        (sigmoid(z) - y) * inv_c * inv_n
                    })
                    .collect();
                total += sample_loss * inv_c;
                d
            }
        };
        // Backward.
        for i in (0..n_layers).rev() {
            let layer = &params.layers[i];
            let g = &mut grads.layers[i];
            let input = &acts[i];
            for (o, &dz) in delta.iter().enumerate() {
                if dz == 0.0 {
                    continue;
                }
                g.bias[o] += dz;
                let row = &mut g.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                row.iter_mut().zip(input).for_each(|(gw, x)| *gw += dz * x);
            }
            if i > 0 {
                let mut prev = vec![0.0; layer.in_dim];
                for (o, &dz) in delta.iter().enumerate() {
                    if dz == 0.0 {
                        continue;
                    }
                    let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                    prev.iter_mut().zip(row).for_each(|(p, w)| *p += dz * w);
                }
                // ReLU derivative from the stored activation.
                prev.iter_mut().zip(input).for_each(|(p, a)| {
                    if *a <= 0.0 {
                        *p = 0.0;
                    }
                });
                delta = prev;
            }
        }
    }
    Ok((total * inv_n, grads))
}

/// Percentage of samples whose true label set meets the `k` most probable
/// relations (ties ranked by ascending relation index).
pub fn topk_accuracy(params: &MlpParams, data: &[Sample], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::validation("k", "must be >= 1"));
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut hits = 0usize;
    for s in data {
        let dist = forward(params, &s.x)?;
        if dist.ranked().iter().take(k).any(|c| s.labels.contains(c)) {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / data.len() as f64)
}

/// Worst disagreement between analytic gradients and central finite
/// differences with step `h`, as `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn gradient_check(params: &MlpParams, batch: &[&Sample], h: f64) -> Result<f64> {
    let (_, grads) = loss_and_grad(params, batch)?;
    let analytic: Vec<f64> = grads.iter().copied().collect();
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for (i, a) in analytic.iter().enumerate() {
        let orig = *probe.param_mut(i).expect("index in range");
        *probe.param_mut(i).expect("index in range") = orig + h;
        let (lp, _) = loss_and_grad(&probe, batch)?;
        *probe.param_mut(i).expect("index in range") = orig - h;
        let (lm, _) = loss_and_grad(&probe, batch)?;
        *probe.param_mut(i).expect("index in range") = orig;
        let n = (lp - lm) / (2.0 * h);
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    Ok(worst)
}
