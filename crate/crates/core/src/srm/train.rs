use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{loss_and_grad, topk_accuracy, Gradients, MlpParams, Sample};
use crate::dataio::{RelationMode, RelationVocabulary};
use crate::features::FeatureSchema;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Multiplier applied to the learning rate at the end of every
    /// `decay_every`-th epoch.
    pub lr_decay: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden: [usize; 2],
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr_decay: 0.5,
            decay_every: 3,
            epochs: 10,
            batch_size: 64,
            hidden: [64, 32],
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::validation("train.lr", "must be > 0"));
        }
        if self.epochs < 1 {
            return Err(Error::validation("train.epochs", "must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::validation("train.batch_size", "must be >= 1"));
        }
        if self.decay_every < 1 {
            return Err(Error::validation("train.decay_every", "must be >= 1"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::validation("train.hidden", "layer widths must be >= 1"));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (1-based).
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let decays = (epoch - 1) / self.decay_every;
        self.lr * self.lr_decay.powi(decays as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean pre-update mini-batch loss over the epoch's samples.
    pub loss: f64,
    pub train_top1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_top1: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamState {
    pub fn new(params: &MlpParams) -> Self {
        let n = params.num_params();
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut MlpParams, grads: &Gradients, state: &mut AdamState, cfg: &TrainConfig, lr: f64) {
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t);
    let bc2 = 1.0 - cfg.beta2.powi(state.t);
    for (((p, g), m), v) in params
        .iter_params_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

fn check_dataset(data: &[Sample], schema: FeatureSchema, vocab: &RelationVocabulary) -> Result<usize> {
    let first = data.first().ok_or(Error::EmptyDataset)?;
    let dim = first.x.len();
    for s in data {
        if s.x.schema != schema || s.x.len() != dim {
            return Err(Error::SchemaMismatch {
                expected: format!("{schema} ({dim} values)"),
                found: format!("{} ({} values)", s.x.schema, s.x.len()),
            });
        }
        if vocab.mode == RelationMode::Multiclass && s.labels.len() != 1 {
            return Err(Error::validation("labels", "multiclass samples need exactly one label"));
        }
    }
    Ok(dim)
}

/// Mini-batch Adam training. Deterministic in `cfg.seed`: the seed drives
/// weight initialization and the per-epoch shuffles. The returned parameters
/// are rounded to `f32` so they survive a save/load cycle unchanged.
pub fn train(
    cfg: &TrainConfig,
    schema: FeatureSchema,
    vocab: &RelationVocabulary,
    data: &[Sample],
    val: Option<&[Sample]>,
) -> Result<(MlpParams, TrainLog)> {
    cfg.validate()?;
    vocab.validate()?;
    let dim = check_dataset(data, schema, vocab)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dims = [dim, cfg.hidden[0], cfg.hidden[1], vocab.len()];
    let mut params = MlpParams::glorot(&dims, schema, vocab.clone(), &mut rng)?;
    let log = train_from(&mut params, cfg, data, val, &mut rng)?;
    params.quantize_f32();
    Ok((params, log))
}

/// Continues training `params` on `data`. The data must match the model's
/// feature schema and input width; `cfg.hidden` is ignored.
pub fn resume(
    cfg: &TrainConfig,
    mut params: MlpParams,
    data: &[Sample],
    val: Option<&[Sample]>,
) -> Result<(MlpParams, TrainLog)> {
    cfg.validate()?;
    let dim = check_dataset(data, params.schema, &params.vocabulary)?;
    if dim != params.input_dim() {
        return Err(Error::SchemaMismatch {
            expected: format!("{} ({} values)", params.schema, params.input_dim()),
            found: format!("{} ({dim} values)", data[0].x.schema),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let log = train_from(&mut params, cfg, data, val, &mut rng)?;
    params.quantize_f32();
    Ok((params, log))
}

fn train_from(
    params: &mut MlpParams,
    cfg: &TrainConfig,
    data: &[Sample],
    val: Option<&[Sample]>,
    rng: &mut ChaCha8Rng,
) -> Result<TrainLog> {
    let mut state = AdamState::new(params);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = TrainLog::default();
    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at_epoch(epoch);
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data[i]).collect();
            let (loss, grads) = loss_and_grad(params, &batch)?;
            loss_sum += loss * batch.len() as f64;
            adam_step(params, &grads, &mut state, cfg, lr);
        }
        let entry = EpochLog {
            epoch,
            lr,
            loss: loss_sum / data.len() as f64,
            train_top1: topk_accuracy(params, data, 1)?,
            val_top1: match val {
                Some(v) if !v.is_empty() => Some(topk_accuracy(params, v, 1)?),
                _ => None,
            },
        };
        log::info!(
            "epoch {epoch}: lr {lr:.6} loss {:.5} train top1 {:.2}%{}",
            entry.loss,
            entry.train_top1,
            entry.val_top1.map(|v| format!(" val top1 {v:.2}%")).unwrap_or_default()
        );
        log.epochs.push(entry);
    }
    Ok(log)
}
